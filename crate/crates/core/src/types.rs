//! Domain types shared by every estimator.
//!
//! Variables are always ordered `(X, Y, Z)`: shared variables first, then the
//! A-only block, then the B-only block. Dataset A's marginal uses the first
//! `p_X + p_Y` indices and dataset B's marginal uses `X` followed by `Z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, submatrix};

/// Sizes of the shared (`X`), A-only (`Y`) and B-only (`Z`) variable groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub p_x: usize,
    pub p_y: usize,
    pub p_z: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl PartitionSpec {
    pub fn new(p_x: usize, p_y: usize, p_z: usize) -> Result<Self> {
        let spec = Self { p_x, p_y, p_z, labels: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_x == 0 || self.p_y == 0 || self.p_z == 0 {
            return Err(Error::InvalidPartition(format!(
                "every group needs at least one variable (p_X={}, p_Y={}, p_Z={})",
                self.p_x, self.p_y, self.p_z
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.p() {
                return Err(Error::InvalidPartition(format!(
                    "{} labels for {} variables",
                    labels.len(),
                    self.p()
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for l in labels {
                if !seen.insert(l.as_str()) {
                    return Err(Error::DuplicateColumn(l.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p_x + self.p_y + self.p_z
    }

    /// Dimension of dataset A, `p_X + p_Y`.
    pub fn p_a(&self) -> usize {
        self.p_x + self.p_y
    }

    /// Dimension of dataset B, `p_X + p_Z`.
    pub fn p_b(&self) -> usize {
        self.p_x + self.p_z
    }

    pub fn x_idx(&self) -> Vec<usize> {
        (0..self.p_x).collect()
    }

    pub fn y_idx(&self) -> Vec<usize> {
        (self.p_x..self.p_a()).collect()
    }

    pub fn z_idx(&self) -> Vec<usize> {
        (self.p_a()..self.p()).collect()
    }

    /// Full-vector indices of dataset A's variables in A's own order.
    pub fn a_idx(&self) -> Vec<usize> {
        (0..self.p_a()).collect()
    }

    /// Full-vector indices of dataset B's variables in B's own order (`X`, `Z`).
    pub fn b_idx(&self) -> Vec<usize> {
        self.x_idx().into_iter().chain(self.z_idx()).collect()
    }
}

/// Loadings `Λ` (p × q) and uniquenesses `diag(Ψ)` of a factor model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub partition: PartitionSpec,
    pub lambda: DMatrix<f64>,
    pub psi: DVector<f64>,
}

impl FactorModel {
    pub fn new(partition: PartitionSpec, lambda: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        partition.validate()?;
        if lambda.nrows() != partition.p() || psi.len() != partition.p() {
            return Err(Error::DimensionMismatch(format!(
                "loadings {}x{} and {} uniquenesses for p = {}",
                lambda.nrows(),
                lambda.ncols(),
                psi.len(),
                partition.p()
            )));
        }
        if lambda.iter().chain(psi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("factor model parameters".into()));
        }
        if psi.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("uniquenesses must be nonnegative".into()));
        }
        Ok(Self { partition, lambda, psi })
    }

    pub fn q(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn p(&self) -> usize {
        self.partition.p()
    }

    /// `ΛΛᵀ + Ψ` as a dense matrix; the upper triangle is computed and
    /// mirrored so the result is bit-symmetric.
    pub fn implied_full(&self) -> DMatrix<f64> {
        let p = self.p();
        let q = self.q();
        let mut sigma = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                let mut s = 0.0;
                for k in 0..q {
                    s += self.lambda[(i, k)] * self.lambda[(j, k)];
                }
                sigma[(i, j)] = s;
                sigma[(j, i)] = s;
            }
            sigma[(i, i)] += self.psi[i];
        }
        sigma
    }

    /// The model-implied covariance split into its named blocks.
    pub fn implied_covariance(&self) -> PartialCovariance {
        PartialCovariance::from_full(&self.implied_full(), &self.partition, true)
            .expect("implied covariance has consistent dimensions")
    }

    pub fn lambda_x(&self) -> DMatrix<f64> {
        linalg::select_rows(&self.lambda, &self.partition.x_idx())
    }

    pub fn lambda_y(&self) -> DMatrix<f64> {
        linalg::select_rows(&self.lambda, &self.partition.y_idx())
    }

    pub fn lambda_z(&self) -> DMatrix<f64> {
        linalg::select_rows(&self.lambda, &self.partition.z_idx())
    }

    /// Loadings of dataset A's variables, `(Λ_X; Λ_Y)`.
    pub fn lambda_a(&self) -> DMatrix<f64> {
        linalg::select_rows(&self.lambda, &self.partition.a_idx())
    }

    /// Loadings of dataset B's variables, `(Λ_X; Λ_Z)`.
    pub fn lambda_b(&self) -> DMatrix<f64> {
        linalg::select_rows(&self.lambda, &self.partition.b_idx())
    }

    /// The cross block `Λ_Y Λ_Zᵀ` this model implies for `Σ_YZ`.
    pub fn sigma_yz(&self) -> DMatrix<f64> {
        self.lambda_y() * self.lambda_z().transpose()
    }

    /// Marginal covariance of dataset A's variables.
    pub fn sigma_a(&self) -> DMatrix<f64> {
        let idx = self.partition.a_idx();
        submatrix(&self.implied_full(), &idx, &idx)
    }

    /// Marginal covariance of dataset B's variables.
    pub fn sigma_b(&self) -> DMatrix<f64> {
        let idx = self.partition.b_idx();
        submatrix(&self.implied_full(), &idx, &idx)
    }
}

/// Sufficient statistics of the two files: uncentred-sum scatter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedScatter {
    pub partition: PartitionSpec,
    /// Σ (x,y)(x,y)ᵀ over dataset A, `p_A × p_A`.
    pub p: DMatrix<f64>,
    /// Σ (x,z)(x,z)ᵀ over dataset B, `p_B × p_B`.
    pub t: DMatrix<f64>,
    pub n_a: usize,
    pub n_b: usize,
}

impl ObservedScatter {
    pub fn new(
        partition: PartitionSpec,
        p: DMatrix<f64>,
        t: DMatrix<f64>,
        n_a: usize,
        n_b: usize,
    ) -> Result<Self> {
        partition.validate()?;
        let (pa, pb) = (partition.p_a(), partition.p_b());
        if p.shape() != (pa, pa) || t.shape() != (pb, pb) {
            return Err(Error::DimensionMismatch(format!(
                "scatters {:?} and {:?}, expected ({pa}, {pa}) and ({pb}, {pb})",
                p.shape(),
                t.shape()
            )));
        }
        if n_a + n_b == 0 {
            return Err(Error::InvalidArgument("no observations".into()));
        }
        if p.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scatter matrix".into()));
        }
        for (name, m) in [("P", &p), ("T", &t)] {
            if !linalg::is_symmetric(m, 1e-10) {
                return Err(Error::InvalidArgument(format!("scatter {name} is not symmetric")));
            }
            let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
            if linalg::min_eigenvalue(m) < -1e-8 * scale {
                return Err(Error::InvalidArgument(format!(
                    "scatter {name} is not positive semidefinite"
                )));
            }
        }
        Ok(Self {
            partition,
            p: linalg::symmetrize(&p),
            t: linalg::symmetrize(&t),
            n_a,
            n_b,
        })
    }

    /// Scatters equal to `n × covariance` for each file.
    pub fn from_covariances(
        partition: PartitionSpec,
        cov_a: &DMatrix<f64>,
        cov_b: &DMatrix<f64>,
        n_a: usize,
        n_b: usize,
    ) -> Result<Self> {
        Self::new(partition, cov_a * n_a as f64, cov_b * n_b as f64, n_a, n_b)
    }

    /// Population-exact scatters `n_A Σ_A` and `n_B Σ_B` of a model.
    pub fn from_model(model: &FactorModel, n_a: usize, n_b: usize) -> Result<Self> {
        Self::from_covariances(
            model.partition.clone(),
            &model.sigma_a(),
            &model.sigma_b(),
            n_a,
            n_b,
        )
    }

    pub fn n(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn p_xx(&self) -> DMatrix<f64> {
        let x = self.partition.x_idx();
        submatrix(&self.p, &x, &x)
    }

    pub fn t_xx(&self) -> DMatrix<f64> {
        let x = self.partition.x_idx();
        submatrix(&self.t, &x, &x)
    }

    /// Per-variable variances pooled over both files (X entries weighted by
    /// sample counts), in full `(X, Y, Z)` order.
    pub fn pooled_variances(&self) -> DVector<f64> {
        let part = &self.partition;
        let (na, nb) = (self.n_a.max(1) as f64, self.n_b.max(1) as f64);
        let n = (self.n_a + self.n_b) as f64;
        let mut v = DVector::zeros(part.p());
        for i in 0..part.p_x {
            v[i] = (self.p[(i, i)] + self.t[(i, i)]) / n;
        }
        for j in 0..part.p_y {
            let k = part.p_x + j;
            v[k] = self.p[(k, k)] / na;
        }
        for j in 0..part.p_z {
            let k = part.p_x + j;
            v[part.p_a() + j] = self.t[(k, k)] / nb;
        }
        v
    }

    /// Lower bound for uniquenesses: `scale × max_j (scatter_jj / n_file)`.
    pub fn psi_floor(&self, scale: f64) -> f64 {
        let na = self.n_a.max(1) as f64;
        let nb = self.n_b.max(1) as f64;
        let a = self.p.diagonal().iter().map(|v| v / na).fold(0.0, f64::max);
        let b = self.t.diagonal().iter().map(|v| v / nb).fold(0.0, f64::max);
        scale * a.max(b).max(f64::MIN_POSITIVE)
    }
}

/// A covariance matrix split into named blocks; `Σ_YZ` may be unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCovariance {
    pub partition: PartitionSpec,
    pub xx: DMatrix<f64>,
    pub xy: DMatrix<f64>,
    pub xz: DMatrix<f64>,
    pub yy: DMatrix<f64>,
    pub zz: DMatrix<f64>,
    pub yz: Option<DMatrix<f64>>,
}

impl PartialCovariance {
    pub fn new(
        partition: PartitionSpec,
        xx: DMatrix<f64>,
        xy: DMatrix<f64>,
        xz: DMatrix<f64>,
        yy: DMatrix<f64>,
        zz: DMatrix<f64>,
        yz: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        partition.validate()?;
        let (px, py, pz) = (partition.p_x, partition.p_y, partition.p_z);
        let shapes = [
            ("XX", xx.shape(), (px, px)),
            ("XY", xy.shape(), (px, py)),
            ("XZ", xz.shape(), (px, pz)),
            ("YY", yy.shape(), (py, py)),
            ("ZZ", zz.shape(), (pz, pz)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "block {name} is {got:?}, expected {want:?}"
                )));
            }
        }
        if let Some(yz) = &yz {
            if yz.shape() != (py, pz) {
                return Err(Error::DimensionMismatch(format!(
                    "block YZ is {:?}, expected {:?}",
                    yz.shape(),
                    (py, pz)
                )));
            }
        }
        for (name, m) in [("XX", &xx), ("YY", &yy), ("ZZ", &zz)] {
            if !linalg::is_symmetric(m, 1e-10) {
                return Err(Error::InvalidArgument(format!("block {name} is not symmetric")));
            }
        }
        Ok(Self { partition, xx, xy, xz, yy, zz, yz })
    }

    /// Split a full `p × p` matrix; `keep_yz = false` drops the cross block.
    pub fn from_full(full: &DMatrix<f64>, partition: &PartitionSpec, keep_yz: bool) -> Result<Self> {
        let p = partition.p();
        if full.shape() != (p, p) {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {:?}, expected ({p}, {p})",
                full.shape()
            )));
        }
        let (x, y, z) = (partition.x_idx(), partition.y_idx(), partition.z_idx());
        Self::new(
            partition.clone(),
            submatrix(full, &x, &x),
            submatrix(full, &x, &y),
            submatrix(full, &x, &z),
            submatrix(full, &y, &y),
            submatrix(full, &z, &z),
            keep_yz.then(|| submatrix(full, &y, &z)),
        )
    }

    /// Build from the two marginal covariance matrices. The shared `XX`
    /// block is the sample-size weighted average of the two estimates.
    pub fn from_marginals(
        partition: &PartitionSpec,
        cov_a: &DMatrix<f64>,
        cov_b: &DMatrix<f64>,
        weight_a: f64,
        weight_b: f64,
    ) -> Result<Self> {
        let (pa, pb) = (partition.p_a(), partition.p_b());
        if cov_a.shape() != (pa, pa) || cov_b.shape() != (pb, pb) {
            return Err(Error::DimensionMismatch("marginal covariance shapes".into()));
        }
        let px = partition.p_x;
        let xa: Vec<usize> = (0..px).collect();
        let ya: Vec<usize> = (px..pa).collect();
        let zb: Vec<usize> = (px..pb).collect();
        let w = weight_a + weight_b;
        let xx = (submatrix(cov_a, &xa, &xa) * weight_a + submatrix(cov_b, &xa, &xa) * weight_b) / w;
        Self::new(
            partition.clone(),
            linalg::symmetrize(&xx),
            submatrix(cov_a, &xa, &ya),
            submatrix(cov_b, &xa, &zb),
            linalg::symmetrize(&submatrix(cov_a, &ya, &ya)),
            linalg::symmetrize(&submatrix(cov_b, &zb, &zb)),
            None,
        )
    }

    /// Covariance estimate `scatter / n` for each file.
    pub fn from_scatter(scatter: &ObservedScatter) -> Result<Self> {
        let na = scatter.n_a.max(1) as f64;
        let nb = scatter.n_b.max(1) as f64;
        Self::from_marginals(
            &scatter.partition,
            &(&scatter.p / na),
            &(&scatter.t / nb),
            scatter.n_a as f64,
            scatter.n_b as f64,
        )
    }

    /// The `(X, Y)` marginal assembly.
    pub fn marginal_a(&self) -> DMatrix<f64> {
        let (px, py) = (self.partition.p_x, self.partition.p_y);
        let mut m = DMatrix::zeros(px + py, px + py);
        m.view_mut((0, 0), (px, px)).copy_from(&self.xx);
        m.view_mut((0, px), (px, py)).copy_from(&self.xy);
        m.view_mut((px, 0), (py, px)).copy_from(&self.xy.transpose());
        m.view_mut((px, px), (py, py)).copy_from(&self.yy);
        m
    }

    /// The `(X, Z)` marginal assembly.
    pub fn marginal_b(&self) -> DMatrix<f64> {
        let (px, pz) = (self.partition.p_x, self.partition.p_z);
        let mut m = DMatrix::zeros(px + pz, px + pz);
        m.view_mut((0, 0), (px, px)).copy_from(&self.xx);
        m.view_mut((0, px), (px, pz)).copy_from(&self.xz);
        m.view_mut((px, 0), (pz, px)).copy_from(&self.xz.transpose());
        m.view_mut((px, px), (pz, pz)).copy_from(&self.zz);
        m
    }

    /// Full matrix with the stored `Σ_YZ`, if any.
    pub fn full(&self) -> Option<DMatrix<f64>> {
        self.yz.as_ref().map(|yz| assemble_full(self, yz).expect("stored block has valid shape"))
    }

    /// Subtract a diagonal, turning covariance blocks into Gram blocks.
    pub fn minus_diagonal(&self, psi: &DVector<f64>) -> Result<Self> {
        let part = &self.partition;
        if psi.len() != part.p() {
            return Err(Error::DimensionMismatch(format!(
                "{} uniquenesses for p = {}",
                psi.len(),
                part.p()
            )));
        }
        let mut out = self.clone();
        for i in 0..part.p_x {
            out.xx[(i, i)] -= psi[i];
        }
        for i in 0..part.p_y {
            out.yy[(i, i)] -= psi[part.p_x + i];
        }
        for i in 0..part.p_z {
            out.zz[(i, i)] -= psi[part.p_a() + i];
        }
        Ok(out)
    }
}

/// Insert a candidate `Σ_YZ` and return the full symmetric `p × p` matrix.
pub fn assemble_full(partial: &PartialCovariance, yz: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let part = &partial.partition;
    let (px, py, pz) = (part.p_x, part.p_y, part.p_z);
    if yz.shape() != (py, pz) {
        return Err(Error::DimensionMismatch(format!(
            "YZ block is {:?}, expected ({py}, {pz})",
            yz.shape()
        )));
    }
    let p = part.p();
    let mut m = DMatrix::zeros(p, p);
    let (ys, zs) = (px, px + py);
    m.view_mut((0, 0), (px, px)).copy_from(&partial.xx);
    m.view_mut((0, ys), (px, py)).copy_from(&partial.xy);
    m.view_mut((ys, 0), (py, px)).copy_from(&partial.xy.transpose());
    m.view_mut((0, zs), (px, pz)).copy_from(&partial.xz);
    m.view_mut((zs, 0), (pz, px)).copy_from(&partial.xz.transpose());
    m.view_mut((ys, ys), (py, py)).copy_from(&partial.yy);
    m.view_mut((zs, zs), (pz, pz)).copy_from(&partial.zz);
    m.view_mut((ys, zs), (py, pz)).copy_from(yz);
    m.view_mut((zs, ys), (pz, py)).copy_from(&yz.transpose());
    Ok(m)
}

/// Output of an EM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: FactorModel,
    /// Observed-data log-likelihood after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: f64,
    pub seed: Option<u64>,
}

impl FitReport {
    /// Largest single-step decrease of the log-likelihood (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.loglik_trace
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}
