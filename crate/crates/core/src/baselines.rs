//! Reference estimators of the unobserved cross-covariance.
//!
//! The data-completion methods work on the stacked `n × p` matrix whose
//! first `n_A` rows come from dataset A (Z missing) and whose remaining
//! rows come from dataset B (Y missing).

use nalgebra::{DMatrix, DVector, SVD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, min_eigenvalue, select_cols, submatrix};
use crate::rng;
use crate::types::{assemble_full, PartialCovariance, PartitionSpec};

/// `Σ_YX Σ_XX⁻¹ Σ_XZ`.
pub fn cia_estimate(partial: &PartialCovariance) -> Result<DMatrix<f64>> {
    let chol = cholesky(&partial.xx, "Σ_XX")?;
    Ok(partial.xy.transpose() * chol.solve(&partial.xz))
}

/// Whether the assembled covariance with `yz` filled in has smallest
/// eigenvalue above `tol`.
pub fn in_identified_set(partial: &PartialCovariance, yz: &DMatrix<f64>, tol: f64) -> Result<bool> {
    let full = assemble_full(partial, yz)?;
    if full.iter().any(|v| !v.is_finite()) {
        return Ok(false);
    }
    Ok(min_eigenvalue(&full) > tol)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImputeMethod {
    Als,
    SoftImpute { lambda: f64 },
    SvdImpute,
}

impl ImputeMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            ImputeMethod::Als => "als",
            ImputeMethod::SoftImpute { .. } => "softimpute",
            ImputeMethod::SvdImpute => "svdimpute",
        }
    }
}

/// A completed data matrix.
#[derive(Debug, Clone)]
pub struct ImputedDataset {
    pub partition: PartitionSpec,
    pub n_a: usize,
    pub n_b: usize,
    /// Low-rank reconstruction of every entry.
    pub d_hat: DMatrix<f64>,
    /// Observed entries with the `Z_A` and `Y_B` blocks taken from `d_hat`.
    pub completed: DMatrix<f64>,
    pub method: ImputeMethod,
    /// Objective after each update (half-steps for ALS).
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl ImputedDataset {
    pub fn n(&self) -> usize {
        self.n_a + self.n_b
    }

    /// True for the entries that were filled in.
    pub fn is_imputed(&self, row: usize, col: usize) -> bool {
        let px = self.partition.p_x;
        let pa = self.partition.p_a();
        if row < self.n_a {
            col >= pa
        } else {
            col >= px && col < pa
        }
    }

    /// Squared error over the observed entries.
    pub fn observed_residual(&self, data: &StackedData) -> f64 {
        data.masked_sq_error(&self.d_hat, &data.observed)
    }
}

/// Both files on a common `(X, Y, Z)` column layout.
#[derive(Debug, Clone)]
pub struct StackedData {
    pub partition: PartitionSpec,
    pub n_a: usize,
    pub n_b: usize,
    /// Missing cells hold zero.
    pub values: DMatrix<f64>,
    pub observed: DMatrix<bool>,
}

impl StackedData {
    pub fn new(partition: &PartitionSpec, data_a: &DMatrix<f64>, data_b: &DMatrix<f64>) -> Result<Self> {
        partition.validate()?;
        let (pa, pb) = (partition.p_a(), partition.p_b());
        if data_a.ncols() != pa || data_b.ncols() != pb {
            return Err(Error::DimensionMismatch(format!(
                "dataset A has {} columns (expected {pa}), dataset B has {} (expected {pb})",
                data_a.ncols(),
                data_b.ncols()
            )));
        }
        if data_a.nrows() == 0 || data_b.nrows() == 0 {
            return Err(Error::InvalidArgument("both datasets need at least one row".into()));
        }
        if data_a.iter().chain(data_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input data".into()));
        }
        let (n_a, n_b) = (data_a.nrows(), data_b.nrows());
        let p = partition.p();
        let mut values = DMatrix::zeros(n_a + n_b, p);
        let mut observed = DMatrix::from_element(n_a + n_b, p, false);
        let a_cols = partition.a_idx();
        let b_cols = partition.b_idx();
        for i in 0..n_a {
            for (k, &j) in a_cols.iter().enumerate() {
                values[(i, j)] = data_a[(i, k)];
                observed[(i, j)] = true;
            }
        }
        for i in 0..n_b {
            for (k, &j) in b_cols.iter().enumerate() {
                values[(n_a + i, j)] = data_b[(i, k)];
                observed[(n_a + i, j)] = true;
            }
        }
        Ok(Self { partition: partition.clone(), n_a, n_b, values, observed })
    }

    pub fn n(&self) -> usize {
        self.n_a + self.n_b
    }

    fn masked_sq_error(&self, fit: &DMatrix<f64>, mask: &DMatrix<bool>) -> f64 {
        let mut s = 0.0;
        for j in 0..self.values.ncols() {
            for i in 0..self.values.nrows() {
                if mask[(i, j)] {
                    let d = self.values[(i, j)] - fit[(i, j)];
                    s += d * d;
                }
            }
        }
        s
    }

    /// Observed cells keep their values, the rest come from `fill`.
    fn merge(&self, fill: &DMatrix<f64>, mask: &DMatrix<bool>) -> DMatrix<f64> {
        DMatrix::from_fn(self.values.nrows(), self.values.ncols(), |i, j| {
            if mask[(i, j)] {
                self.values[(i, j)]
            } else {
                fill[(i, j)]
            }
        })
    }

    /// Observed values with each column's observed mean in the gaps.
    fn mean_filled(&self) -> DMatrix<f64> {
        let mut out = self.values.clone();
        for j in 0..out.ncols() {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for i in 0..out.nrows() {
                if self.observed[(i, j)] {
                    sum += self.values[(i, j)];
                    cnt += 1;
                }
            }
            let mean = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
            for i in 0..out.nrows() {
                if !self.observed[(i, j)] {
                    out[(i, j)] = mean;
                }
            }
        }
        out
    }

    fn finish(&self, d_hat: DMatrix<f64>, method: ImputeMethod, trace: Vec<f64>, converged: bool) -> ImputedDataset {
        let completed = self.merge(&d_hat, &self.observed);
        ImputedDataset {
            partition: self.partition.clone(),
            n_a: self.n_a,
            n_b: self.n_b,
            d_hat,
            completed,
            method,
            objective_trace: trace,
            converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsOptions {
    pub max_iter: usize,
    /// Relative objective change below which iteration stops.
    pub tol: f64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-9 }
    }
}

fn solve_normal(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky(gram, what).map_err(|_| Error::SingularSubproblem(what.to_string()))?;
    Ok(chol.solve(rhs))
}

fn top_right_singular(m: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let svd = SVD::new(m.clone(), false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::NonFinite("SVD".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    if order.len() < q {
        return Err(Error::RankDeficient { context: "ALS initialisation".into(), needed: q, found: order.len() });
    }
    Ok(DMatrix::from_fn(q, m.ncols(), |r, c| v_t[(order[r], c)]))
}

/// Alternating least squares over the observed entries: `D ≈ G H` with
/// `G` of size `n × q` and `H` of size `q × p`.
pub fn als_complete(
    partition: &PartitionSpec,
    data_a: &DMatrix<f64>,
    data_b: &DMatrix<f64>,
    q: usize,
    opts: &AlsOptions,
) -> Result<ImputedDataset> {
    let data = StackedData::new(partition, data_a, data_b)?;
    als_stacked(&data, q, opts)
}

pub fn als_stacked(data: &StackedData, q: usize, opts: &AlsOptions) -> Result<ImputedDataset> {
    let part = &data.partition;
    let (n, p) = (data.n(), part.p());
    if q == 0 || q > n.min(p) {
        return Err(Error::InvalidArgument(format!("rank {q} outside 1..={}", n.min(p))));
    }
    let a_cols = part.a_idx();
    let b_cols = part.b_idx();
    let (n_a, n_b) = (data.n_a, data.n_b);
    let a_rows: Vec<usize> = (0..n_a).collect();
    let b_rows: Vec<usize> = (n_a..n).collect();
    let all_rows: Vec<usize> = (0..n).collect();
    let obs_a = submatrix(&data.values, &a_rows, &a_cols);
    let obs_b = submatrix(&data.values, &b_rows, &b_cols);

    let mut h = top_right_singular(&data.mean_filled(), q)?;
    let mut g = DMatrix::zeros(n, q);
    let objective = |g: &DMatrix<f64>, h: &DMatrix<f64>| 0.5 * data.masked_sq_error(&(g * h), &data.observed);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_iter {
        // Row factors, one shared system per file.
        let h_a = select_cols(&h, &a_cols);
        let g_a = solve_normal(&(&h_a * h_a.transpose()), &(&h_a * obs_a.transpose()), "ALS row update (A)")?;
        let h_b = select_cols(&h, &b_cols);
        let g_b = solve_normal(&(&h_b * h_b.transpose()), &(&h_b * obs_b.transpose()), "ALS row update (B)")?;
        g.rows_mut(0, n_a).copy_from(&g_a.transpose());
        g.rows_mut(n_a, n_b).copy_from(&g_b.transpose());
        trace.push(objective(&g, &h));

        // Column factors, grouped by which rows observe them.
        for (cols, rows) in [(part.x_idx(), &all_rows), (part.y_idx(), &a_rows), (part.z_idx(), &b_rows)] {
            let g_r = linalg::select_rows(&g, rows);
            let d_r = submatrix(&data.values, rows, &cols);
            let h_c = solve_normal(&(g_r.transpose() * &g_r), &(g_r.transpose() * d_r), "ALS column update")?;
            for (k, &j) in cols.iter().enumerate() {
                h.column_mut(j).copy_from(&h_c.column(k));
            }
        }
        let f = objective(&g, &h);
        trace.push(f);
        if !f.is_finite() {
            return Err(Error::NonFinite("ALS objective".into()));
        }
        if prev.is_finite() && (prev - f) <= opts.tol * prev.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        prev = f;
    }
    let d_hat = &g * &h;
    Ok(data.finish(d_hat, ImputeMethod::Als, trace, converged))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftImputeOptions {
    /// Explicit decreasing grid; `None` uses the default log-spaced grid.
    pub lambda_grid: Option<Vec<f64>>,
    pub grid_len: usize,
    /// Smallest grid value as a fraction of the largest.
    pub grid_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Keep at most this many singular values.
    pub max_rank: Option<usize>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SoftImputeOptions {
    fn default() -> Self {
        Self {
            lambda_grid: None,
            grid_len: 20,
            grid_ratio: 1e-3,
            max_iter: 500,
            tol: 1e-9,
            max_rank: None,
            holdout_fraction: 0.1,
            seed: rng::DEFAULT_SEED,
        }
    }
}

/// `U f(S) Vᵀ` for the SVD `U S Vᵀ` of `m`, with `f` applied by rank order.
///
/// Tall inputs go through the eigenvectors of `mᵀm`, which keeps the cost
/// linear in the number of rows.
fn spectral_map(m: &DMatrix<f64>, shrink: impl Fn(usize, f64) -> f64) -> Result<DMatrix<f64>> {
    if m.nrows() < m.ncols() {
        return Ok(spectral_map(&m.transpose(), shrink)?.transpose());
    }
    let gram = linalg::symmetrize(&(m.transpose() * m));
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectral map input".into()));
    }
    let (vals, vecs) = linalg::sym_eigen_desc(&gram);
    let top = vals.max().max(0.0).sqrt();
    let floor = top * f64::EPSILON * m.nrows() as f64;
    let mut weights = DVector::zeros(vals.len());
    for k in 0..vals.len() {
        let s = vals[k].max(0.0).sqrt();
        if s > floor {
            weights[k] = shrink(k, s) / s;
        }
    }
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, k| vecs[(i, k)] * weights[k]);
    Ok(m * (scaled * vecs.transpose()))
}

fn soft_threshold_step(lambda: f64, max_rank: Option<usize>) -> impl Fn(usize, f64) -> f64 {
    move |rank, s| {
        if max_rank.is_some_and(|r| rank >= r) {
            0.0
        } else {
            (s - lambda).max(0.0)
        }
    }
}

/// Iterate `Z ← S_λ(P_Ω(D) + P_Ω⊥(Z))` until the relative change drops below `tol`.
fn soft_impute_at(
    data: &StackedData,
    mask: &DMatrix<bool>,
    lambda: f64,
    start: &DMatrix<f64>,
    opts: &SoftImputeOptions,
) -> Result<(DMatrix<f64>, Vec<f64>, bool)> {
    let mut z = start.clone();
    let mut trace = Vec::new();
    for _ in 0..opts.max_iter {
        let filled = data.merge(&z, mask);
        let next = spectral_map(&filled, soft_threshold_step(lambda, opts.max_rank))?;
        let change = linalg::frobenius_sq(&(&next - &z));
        let base = linalg::frobenius_sq(&z);
        z = next;
        trace.push(0.5 * data.masked_sq_error(&z, mask));
        if change <= opts.tol * base.max(f64::MIN_POSITIVE) {
            return Ok((z, trace, true));
        }
    }
    Ok((z, trace, false))
}

/// The default grid: log-spaced from the spectral norm of the zero-filled
/// matrix down to `grid_ratio` of it.
pub fn default_lambda_grid(data: &StackedData, len: usize, ratio: f64) -> Vec<f64> {
    let top = linalg::spectral_norm(&data.values);
    if len <= 1 {
        return vec![top];
    }
    let (hi, lo) = (top.ln(), (top * ratio).ln());
    (0..len).map(|k| (hi + (lo - hi) * k as f64 / (len - 1) as f64).exp()).collect()
}

fn resolve_grid(data: &StackedData, opts: &SoftImputeOptions) -> Result<Vec<f64>> {
    let grid = match &opts.lambda_grid {
        Some(g) => g.clone(),
        None => default_lambda_grid(data, opts.grid_len, opts.grid_ratio),
    };
    if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidArgument("lambda grid must be nonempty, finite and nonnegative".into()));
    }
    if grid.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument("lambda grid must be decreasing".into()));
    }
    Ok(grid)
}

/// Fits along the whole grid with warm starts on every observed entry.
pub fn soft_impute_path(data: &StackedData, opts: &SoftImputeOptions) -> Result<Vec<ImputedDataset>> {
    let grid = resolve_grid(data, opts)?;
    let mut z = DMatrix::zeros(data.n(), data.partition.p());
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let (next, trace, conv) = soft_impute_at(data, &data.observed, lambda, &z, opts)?;
        z = next;
        out.push(data.finish(z.clone(), ImputeMethod::SoftImpute { lambda }, trace, conv));
    }
    Ok(out)
}

/// Soft-Impute with `λ` picked on a held-out share of the observed entries.
pub fn soft_impute(
    partition: &PartitionSpec,
    data_a: &DMatrix<f64>,
    data_b: &DMatrix<f64>,
    opts: &SoftImputeOptions,
) -> Result<ImputedDataset> {
    let data = StackedData::new(partition, data_a, data_b)?;
    soft_impute_stacked(&data, opts)
}

pub fn soft_impute_stacked(data: &StackedData, opts: &SoftImputeOptions) -> Result<ImputedDataset> {
    let grid = resolve_grid(data, opts)?;
    let best = if grid.len() == 1 || opts.holdout_fraction <= 0.0 {
        grid.len() - 1
    } else {
        let mut g = rng::stream(opts.seed, 0);
        let mut train = data.observed.clone();
        let mut held = DMatrix::from_element(data.n(), data.partition.p(), false);
        for j in 0..train.ncols() {
            for i in 0..train.nrows() {
                if train[(i, j)] && g.random::<f64>() < opts.holdout_fraction {
                    train[(i, j)] = false;
                    held[(i, j)] = true;
                }
            }
        }
        let mut z = DMatrix::zeros(data.n(), data.partition.p());
        let mut best = (0usize, f64::INFINITY);
        for (k, &lambda) in grid.iter().enumerate() {
            z = soft_impute_at(data, &train, lambda, &z, opts)?.0;
            let err = data.masked_sq_error(&z, &held);
            if err < best.1 {
                best = (k, err);
            }
        }
        best.0
    };
    let path_opts = SoftImputeOptions { lambda_grid: Some(grid[..=best].to_vec()), ..opts.clone() };
    let mut path = soft_impute_path(data, &path_opts)?;
    Ok(path.pop().expect("nonempty grid"))
}

/// Hard rank-`q` SVD imputation started from the mean-filled matrix.
pub fn svd_impute(
    partition: &PartitionSpec,
    data_a: &DMatrix<f64>,
    data_b: &DMatrix<f64>,
    q: usize,
    opts: &AlsOptions,
) -> Result<ImputedDataset> {
    let data = StackedData::new(partition, data_a, data_b)?;
    svd_impute_stacked(&data, q, opts)
}

pub fn svd_impute_stacked(data: &StackedData, q: usize, opts: &AlsOptions) -> Result<ImputedDataset> {
    let (n, p) = (data.n(), data.partition.p());
    if q == 0 || q > n.min(p) {
        return Err(Error::InvalidArgument(format!("rank {q} outside 1..={}", n.min(p))));
    }
    let mut filled = data.mean_filled();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut z = filled.clone();
    for _ in 0..opts.max_iter {
        let next = spectral_map(&filled, |rank, s| if rank < q { s } else { 0.0 })?;
        let change = linalg::frobenius_sq(&(&next - &z));
        let base = linalg::frobenius_sq(&z);
        z = next;
        trace.push(0.5 * data.masked_sq_error(&z, &data.observed));
        filled = data.merge(&z, &data.observed);
        if change <= opts.tol * base.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(data.finish(z, ImputeMethod::SvdImpute, trace, converged))
}

/// Centred cross-covariance (denominator `n`) of the stacked
/// `(Y_A; Ŷ_B)` and `(Ẑ_A; Z_B)` columns.
pub fn covariance_from_imputed(imputed: &ImputedDataset) -> DMatrix<f64> {
    let part = &imputed.partition;
    let y = select_cols(&imputed.completed, &part.y_idx());
    let z = select_cols(&imputed.completed, &part.z_idx());
    cross_covariance(&y, &z)
}

/// `(1/n) Σ (y_i − ȳ)(z_i − z̄)ᵀ`.
pub fn cross_covariance(y: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows() as f64;
    let ym = DVector::from_fn(y.ncols(), |j, _| y.column(j).sum() / n);
    let zm = DVector::from_fn(z.ncols(), |j, _| z.column(j).sum() / n);
    let mut yc = y.clone();
    let mut zc = z.clone();
    for j in 0..yc.ncols() {
        yc.column_mut(j).add_scalar_mut(-ym[j]);
    }
    for j in 0..zc.ncols() {
        zc.column_mut(j).add_scalar_mut(-zm[j]);
    }
    yc.transpose() * zc / n
}
