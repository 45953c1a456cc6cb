//! Identifiability diagnostics for the file-matching factor model.
//!
//! Two families of checks are exposed. The counting rules compare the number
//! of covariance equations with the number of free parameters: `C` for
//! complete data and `C_M = C - p_Y p_Z` once the `Σ_YZ` equations are lost.
//! The rank conditions require `Λ_X` to have full column rank `q` and both
//! marginal loading matrices to keep two disjoint rank-`q` row subsets after
//! deleting any single row.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::select_rows;
use crate::types::{FactorModel, PartitionSpec};

/// Largest matrix height for which the exhaustive row-subset search runs.
pub const MAX_EXHAUSTIVE_ROWS: usize = 25;

/// Relative factor applied to the largest singular value to get the default
/// numerical-rank tolerance.
pub const RANK_TOL_REL: f64 = 1e-8;

/// `C = [(p - q)² - p - q] / 2`.
///
/// `(p - q)²` has the parity of `p - q`, which matches the parity of `p + q`,
/// so the numerator is always even and the count is an exact integer.
pub fn dof_complete(p: usize, q: usize) -> Result<i64> {
    if q >= p {
        return Err(Error::InvalidArgument(format!("q = {q} must be below p = {p}")));
    }
    let (p, q) = (p as i64, q as i64);
    let num = (p - q) * (p - q) - p - q;
    debug_assert_eq!(num % 2, 0);
    Ok(num / 2)
}

/// `C_M = C - p_Y p_Z`.
pub fn dof_matching(p_x: usize, p_y: usize, p_z: usize, q: usize) -> Result<i64> {
    let c = dof_complete(p_x + p_y + p_z, q)?;
    Ok(c - (p_y * p_z) as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// `C ≥ 0`.
    Complete,
    /// `C_M ≥ 0`.
    Matching,
    /// The dimension conditions `q ≤ p_X`, `q < (p_X+p_Y)/2`, `q < (p_X+p_Z)/2`.
    Assumption2,
}

/// `q ≤ p_X`.
pub fn assumption1_dims(part: &PartitionSpec, q: usize) -> bool {
    q <= part.p_x
}

/// `q < (p_X+p_Y)/2` and `q < (p_X+p_Z)/2`, evaluated in integers.
pub fn assumption2_dims(part: &PartitionSpec, q: usize) -> bool {
    2 * q < part.p_a() && 2 * q < part.p_b()
}

/// Largest `q ≥ 0` meeting the criterion (0 when none larger does).
pub fn max_factors(p_x: usize, p_y: usize, p_z: usize, criterion: Criterion) -> usize {
    let p = p_x + p_y + p_z;
    let ok = |q: usize| -> bool {
        match criterion {
            Criterion::Complete => dof_complete(p, q).map(|c| c >= 0).unwrap_or(false),
            Criterion::Matching => dof_matching(p_x, p_y, p_z, q).map(|c| c >= 0).unwrap_or(false),
            Criterion::Assumption2 => {
                q <= p_x && 2 * q < p_x + p_y && 2 * q < p_x + p_z
            }
        }
    };
    (0..p).filter(|&q| ok(q)).max().unwrap_or(0)
}

/// Default numerical-rank tolerance for a matrix.
pub fn default_rank_tol(m: &DMatrix<f64>) -> f64 {
    RANK_TOL_REL * crate::linalg::spectral_norm(m)
}

fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > tol)
        .count()
}

/// Whether `Λ_X` has numerical rank `q`.
pub fn check_assumption1_numeric(lambda_x: &DMatrix<f64>, tol: f64) -> bool {
    numerical_rank(lambda_x, tol) == lambda_x.ncols()
}

/// Advance `combo` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in (i + 1)..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Rows `rows` contain two disjoint subsets each of rank `q`.
///
/// Any rank-`q` row subset contains a `q`-row subset of rank `q`, so it is
/// enough to enumerate `q`-subsets for the first block and ask whether the
/// remaining rows still span rank `q`.
fn has_two_disjoint_rank_q(lambda: &DMatrix<f64>, rows: &[usize], tol: f64) -> bool {
    let q = lambda.ncols();
    let m = rows.len();
    if m < 2 * q {
        return false;
    }
    if numerical_rank(&select_rows(lambda, rows), tol) < q {
        return false;
    }
    let mut combo: Vec<usize> = (0..q).collect();
    loop {
        let first: Vec<usize> = combo.iter().map(|&i| rows[i]).collect();
        if numerical_rank(&select_rows(lambda, &first), tol) == q {
            let rest: Vec<usize> = rows
                .iter()
                .enumerate()
                .filter(|(i, _)| !combo.contains(i))
                .map(|(_, &r)| r)
                .collect();
            if numerical_rank(&select_rows(lambda, &rest), tol) == q {
                return true;
            }
        }
        if !next_combination(&mut combo, m) {
            return false;
        }
    }
}

/// Row-deletion test on a marginal loading matrix (`Λ_A` or `Λ_B`).
///
/// Returns `None` when the matrix has more than [`MAX_EXHAUSTIVE_ROWS`] rows
/// (not checked), `Some(false)` when it has fewer than `2q + 1` rows.
pub fn check_assumption2_numeric(lambda: &DMatrix<f64>, tol: f64) -> Option<bool> {
    let m = lambda.nrows();
    let q = lambda.ncols();
    if m > MAX_EXHAUSTIVE_ROWS {
        return None;
    }
    if q == 0 {
        return Some(true);
    }
    if m < 2 * q + 1 {
        return Some(false);
    }
    let ok = (0..m).all(|deleted| {
        let rows: Vec<usize> = (0..m).filter(|&r| r != deleted).collect();
        has_two_disjoint_rank_q(lambda, &rows, tol)
    });
    Some(ok)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityReport {
    pub partition: PartitionSpec,
    pub q: usize,
    pub assumption1_dim_ok: bool,
    pub assumption2_dim_ok: bool,
    /// `None` when `q ≥ p`.
    pub c: Option<i64>,
    pub c_m: Option<i64>,
    pub numeric_assumption1: Option<bool>,
    /// Row-deletion verdict on both `Λ_A` and `Λ_B`; `None` when no model was
    /// supplied or the matrices are too tall for the exhaustive search.
    pub numeric_assumption2: Option<bool>,
}

impl IdentifiabilityReport {
    pub fn new(partition: &PartitionSpec, q: usize, model: Option<&FactorModel>) -> Self {
        let p = partition.p();
        let c = dof_complete(p, q).ok();
        let c_m = dof_matching(partition.p_x, partition.p_y, partition.p_z, q).ok();
        let (numeric_assumption1, numeric_assumption2) = match model {
            Some(m) => {
                let tol = default_rank_tol(&m.lambda);
                let a1 = check_assumption1_numeric(&m.lambda_x(), tol);
                let a2 = match (
                    check_assumption2_numeric(&m.lambda_a(), tol),
                    check_assumption2_numeric(&m.lambda_b(), tol),
                ) {
                    (Some(a), Some(b)) => Some(a && b),
                    (Some(false), None) | (None, Some(false)) => Some(false),
                    _ => None,
                };
                (Some(a1), a2)
            }
            None => (None, None),
        };
        Self {
            partition: partition.clone(),
            q,
            assumption1_dim_ok: assumption1_dims(partition, q),
            assumption2_dim_ok: assumption2_dims(partition, q),
            c,
            c_m,
            numeric_assumption1,
            numeric_assumption2,
        }
    }

    pub fn c_nonnegative(&self) -> bool {
        self.c.is_some_and(|c| c >= 0)
    }

    pub fn c_m_nonnegative(&self) -> bool {
        self.c_m.is_some_and(|c| c >= 0)
    }
}

/// Range of `q` meeting both dimension conditions (`1..=max`), possibly empty.
pub fn feasible_q_range(part: &PartitionSpec) -> std::ops::RangeInclusive<usize> {
    1..=max_factors(part.p_x, part.p_y, part.p_z, Criterion::Assumption2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn dof_complete_examples() {
        assert_eq!(dof_complete(3, 1).unwrap(), 0);
        assert_eq!(dof_complete(12, 7).unwrap(), 3);
        assert_eq!(dof_complete(15, 10).unwrap(), 0);
        assert_eq!(dof_complete(15, 11).unwrap(), -5);
        assert!(dof_complete(4, 4).is_err());
    }

    #[test]
    fn dof_matching_examples() {
        assert_eq!(dof_complete(12, 5).unwrap(), 16);
        assert_eq!(dof_matching(4, 4, 4, 5).unwrap(), 0);
        assert_eq!(dof_matching(5, 5, 5, 6).unwrap(), 5);
        assert_eq!(dof_matching(7, 7, 7, 9).unwrap(), 8);
        assert_eq!(dof_matching(7, 7, 7, 10).unwrap(), -4);
    }

    #[test]
    fn max_factors_p9() {
        assert_eq!(max_factors(3, 3, 3, Criterion::Complete), 5);
        assert_eq!(max_factors(3, 3, 3, Criterion::Matching), 3);
        assert_eq!(max_factors(3, 3, 3, Criterion::Assumption2), 2);
    }

    #[test]
    fn assumption2_numeric_examples() {
        let ones = DMatrix::from_element(3, 1, 1.0);
        assert_eq!(check_assumption2_numeric(&ones, 1e-12), Some(true));
        let four = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        assert_eq!(check_assumption2_numeric(&four, 1e-12), Some(false));
        let tall = DMatrix::from_element(26, 1, 1.0);
        assert_eq!(check_assumption2_numeric(&tall, 1e-12), None);
    }

    /// Independent oracle: enumerate every pair of disjoint nonempty row
    /// subsets (as bitmasks) and test each for rank `q`.
    fn brute_force_assumption2(lambda: &DMatrix<f64>, tol: f64) -> bool {
        let m = lambda.nrows();
        let q = lambda.ncols();
        let rank_of = |mask: u32| {
            let rows: Vec<usize> = (0..m).filter(|r| mask & (1 << r) != 0).collect();
            numerical_rank(&select_rows(lambda, &rows), tol)
        };
        (0..m).all(|deleted| {
            let avail: u32 = ((1u32 << m) - 1) & !(1 << deleted);
            let mut s1 = avail;
            while s1 > 0 {
                if rank_of(s1) == q {
                    let rest = avail & !s1;
                    let mut s2 = rest;
                    while s2 > 0 {
                        if rank_of(s2) == q {
                            return true;
                        }
                        s2 = (s2 - 1) & rest;
                    }
                }
                s1 = (s1 - 1) & avail;
            }
            false
        })
    }

    #[test]
    fn assumption2_matches_brute_force() {
        for seed in 0..6u64 {
            let mut r = rng::stream(seed, 0);
            let g = rng::normal_matrix(&mut r, 7, 3, 0.0, 1.0);
            let tol = default_rank_tol(&g);
            assert!(brute_force_assumption2(&g, tol));
            assert_eq!(check_assumption2_numeric(&g, tol), Some(true));
        }
        // Rank-deficient structure: rows 0..4 are multiples of e1, so only
        // two rows carry the second direction.
        let mut m = DMatrix::zeros(6, 2);
        for i in 0..4 {
            m[(i, 0)] = 1.0 + i as f64;
        }
        m[(4, 1)] = 1.0;
        m[(5, 0)] = 1.0;
        m[(5, 1)] = 2.0;
        assert_eq!(brute_force_assumption2(&m, 1e-10), false);
        assert_eq!(check_assumption2_numeric(&m, 1e-10), Some(false));
    }

    #[test]
    fn report_flags() {
        let part = PartitionSpec::new(4, 4, 3).unwrap();
        let r = IdentifiabilityReport::new(&part, 4, None);
        assert!(r.c_nonnegative() && r.c_m_nonnegative());
        assert!(!r.assumption2_dim_ok);
        assert!(r.assumption1_dim_ok);
        assert_eq!(r.numeric_assumption2, None);
    }

    proptest! {
        #[test]
        fn matching_never_exceeds_complete(px in 1usize..8, py in 1usize..8, pz in 1usize..8, q in 0usize..10) {
            let p = px + py + pz;
            prop_assume!(q < p);
            prop_assert!(dof_matching(px, py, pz, q).unwrap() < dof_complete(p, q).unwrap());
        }

        #[test]
        fn assumption2_monotone_in_tol(seed in 0u64..200, shrink in 0.0f64..1.0) {
            let mut r = rng::stream(seed, 3);
            let mut g = rng::normal_matrix(&mut r, 6, 2, 0.0, 1.0);
            // Make one row nearly dependent so the verdict depends on tol.
            let row0 = g.row(0).clone_owned();
            g.row_mut(1).copy_from(&(row0 * 2.0));
            g[(1, 1)] += 1e-6;
            let tol = 1e-4;
            let loose = check_assumption2_numeric(&g, tol).unwrap();
            let tight = check_assumption2_numeric(&g, tol * shrink).unwrap();
            prop_assert!(!loose || tight);
        }
    }
}
