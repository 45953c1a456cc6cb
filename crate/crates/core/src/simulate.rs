//! Synthetic data and the experiment protocols.
//!
//! Loadings are drawn i.i.d. `N(loading_mean, loading_sd²)` and the
//! uniquenesses are `D_j²` with `D_j ~ N(uniqueness_base, uniqueness_sd²)`.
//! Gaussian rows are drawn through a Cholesky factor of the target
//! covariance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baselines::{self, AlsOptions, SoftImputeOptions, StackedData};
use crate::em::{self, EmConfig, Init};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, select_cols, select_rows};
use crate::rng;
use crate::types::{FactorModel, FitReport, ObservedScatter, PartialCovariance, PartitionSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub partition: PartitionSpec,
    pub q_true: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub loading_mean: f64,
    pub loading_sd: f64,
    pub uniqueness_base: f64,
    pub uniqueness_sd: f64,
    /// Rescale the model so the implied covariance is a correlation matrix.
    pub standardize: bool,
    pub seed: u64,
}

impl SimDesign {
    pub fn new(partition: PartitionSpec, q_true: usize, n_a: usize, n_b: usize, seed: u64) -> Self {
        Self {
            partition,
            q_true,
            n_a,
            n_b,
            loading_mean: 2.0,
            loading_sd: 1.0,
            uniqueness_base: 3.0,
            uniqueness_sd: 0.1,
            standardize: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.q_true == 0 || self.n_a == 0 || self.n_b == 0 {
            return Err(Error::InvalidArgument("q_true, n_A and n_B must be at least 1".into()));
        }
        if !(self.loading_sd >= 0.0) || !(self.uniqueness_sd >= 0.0) {
            return Err(Error::InvalidArgument("standard deviations must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Draw a factor model from the design; returns the model and its `Σ`.
pub fn sample_model(design: &SimDesign) -> Result<(FactorModel, DMatrix<f64>)> {
    design.validate()?;
    let p = design.partition.p();
    let mut g = rng::stream(design.seed, 0);
    let mut lambda = rng::normal_matrix(&mut g, p, design.q_true, design.loading_mean, design.loading_sd);
    let d = rng::normal_matrix(&mut g, p, 1, design.uniqueness_base, design.uniqueness_sd);
    let mut psi = DVector::from_fn(p, |i, _| d[(i, 0)] * d[(i, 0)]);
    if design.standardize {
        for i in 0..p {
            let var = lambda.row(i).norm_squared() + psi[i];
            let sd = var.sqrt();
            lambda.row_mut(i).scale_mut(1.0 / sd);
            psi[i] /= var;
        }
    }
    let model = FactorModel::new(design.partition.clone(), lambda, psi)?;
    let sigma = model.implied_full();
    Ok((model, sigma))
}

/// `n` rows drawn from `N(0, sigma)`.
pub fn sample_gaussian(sigma: &DMatrix<f64>, n: usize, seed: u64, stream: u64) -> Result<DMatrix<f64>> {
    let chol = cholesky(sigma, "simulation covariance")?;
    let mut g = rng::stream(seed, stream);
    let z = rng::normal_matrix(&mut g, n, sigma.nrows(), 0.0, 1.0);
    Ok(z * chol.l().transpose())
}

/// Subtract column means in place and return them.
pub fn center_columns(data: &mut DMatrix<f64>) -> DVector<f64> {
    let n = data.nrows().max(1) as f64;
    let means = DVector::from_fn(data.ncols(), |j, _| data.column(j).sum() / n);
    for j in 0..data.ncols() {
        let m = means[j];
        data.column_mut(j).add_scalar_mut(-m);
    }
    means
}

/// `Σ_i r_i r_iᵀ` over the rows of `data`.
pub fn scatter_of(data: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::symmetrize(&(data.transpose() * data))
}

#[derive(Debug, Clone)]
pub struct SampledPair {
    /// Raw `(X, Y)` rows of dataset A.
    pub data_a: DMatrix<f64>,
    /// Raw `(X, Z)` rows of dataset B.
    pub data_b: DMatrix<f64>,
    /// Scatters of the per-file centred data.
    pub scatter: ObservedScatter,
}

/// Draw dataset A from `Σ_A` and dataset B from `Σ_B`.
pub fn sample_datasets(model: &FactorModel, n_a: usize, n_b: usize, seed: u64) -> Result<SampledPair> {
    if model.psi.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument("simulation needs strictly positive uniquenesses".into()));
    }
    let data_a = sample_gaussian(&model.sigma_a(), n_a, seed, 0)?;
    let data_b = sample_gaussian(&model.sigma_b(), n_b, seed, 1)?;
    let mut ca = data_a.clone();
    let mut cb = data_b.clone();
    center_columns(&mut ca);
    center_columns(&mut cb);
    let scatter = ObservedScatter::new(model.partition.clone(), scatter_of(&ca), scatter_of(&cb), n_a, n_b)?;
    Ok(SampledPair { data_a, data_b, scatter })
}

/// `‖estimate − truth‖²_F / (p_Y p_Z)`.
pub fn mse_yz(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() || estimate.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "estimate {:?} vs truth {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    Ok(linalg::frobenius_sq(&(estimate - truth)) / estimate.len() as f64)
}

/// Mean squared error over every entry of `Σ` outside the `YZ`/`ZY` blocks.
pub fn mse_observed_blocks(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, part: &PartitionSpec) -> Result<f64> {
    let p = part.p();
    if estimate.shape() != (p, p) || truth.shape() != (p, p) {
        return Err(Error::DimensionMismatch("full covariance shapes".into()));
    }
    let group = |i: usize| {
        if i < part.p_x {
            0
        } else if i < part.p_a() {
            1
        } else {
            2
        }
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..p {
        for j in 0..p {
            let (gi, gj) = (group(i), group(j));
            if (gi == 1 && gj == 2) || (gi == 2 && gj == 1) {
                continue;
            }
            let d = estimate[(i, j)] - truth[(i, j)];
            sum += d * d;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityExperiment {
    pub partition: PartitionSpec,
    pub qs: Vec<usize>,
    /// Random initialisations per panel.
    pub seeds: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Nominal sample size used to turn `Σ` into scatters.
    pub nominal_n: usize,
    pub seed: u64,
}

impl Default for IdentifiabilityExperiment {
    fn default() -> Self {
        Self {
            partition: PartitionSpec::new(4, 4, 4).expect("valid partition"),
            qs: vec![3, 4, 5],
            seeds: 50,
            max_iter: 10_000,
            tol: 1e-14,
            nominal_n: 1000,
            seed: rng::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityRecord {
    pub q: usize,
    pub seed_index: usize,
    pub mse_yz: f64,
    pub mse_observed: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: f64,
    /// Largest one-step drop in the log-likelihood trace.
    pub max_decrease: f64,
    pub error: Option<String>,
}

pub fn write_identifiability_csv<W: Write>(records: &[IdentifiabilityRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "q",
        "seed_index",
        "mse_yz",
        "mse_observed",
        "iterations",
        "converged",
        "final_loglik",
        "max_decrease",
        "error",
    ])?;
    for r in records {
        w.write_record([
            r.q.to_string(),
            r.seed_index.to_string(),
            r.mse_yz.to_string(),
            r.mse_observed.to_string(),
            r.iterations.to_string(),
            r.converged.to_string(),
            r.final_loglik.to_string(),
            r.max_decrease.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The true model of one panel of the identifiability experiment.
pub fn identifiability_truth(exp: &IdentifiabilityExperiment, q: usize) -> Result<FactorModel> {
    let design = SimDesign::new(exp.partition.clone(), q, exp.nominal_n, exp.nominal_n, rng::child_seed(exp.seed, q as u64));
    Ok(sample_model(&design)?.0)
}

/// Fit each panel's population-exact scatters from `seeds` random starts.
pub fn run_identifiability_experiment(exp: &IdentifiabilityExperiment) -> Result<Vec<IdentifiabilityRecord>> {
    let mut out = Vec::new();
    for &q in &exp.qs {
        let truth = identifiability_truth(exp, q)?;
        let sigma = truth.implied_full();
        let scatter = ObservedScatter::from_model(&truth, exp.nominal_n, exp.nominal_n)?;
        let panel_seed = rng::child_seed(exp.seed, 1000 + q as u64);
        let records: Vec<IdentifiabilityRecord> = (0..exp.seeds)
            .into_par_iter()
            .map(|s| {
                let config = EmConfig {
                    max_iter: exp.max_iter,
                    tol: exp.tol,
                    seed: rng::child_seed(panel_seed, s as u64),
                    init: Init::Random { restarts: 1, burn_iters: 0 },
                    psi_floor_scale: 1e-8,
                };
                match em::fit(&scatter, q, &config) {
                    Ok(rep) => {
                        let est = rep.model.implied_full();
                        IdentifiabilityRecord {
                            q,
                            seed_index: s,
                            mse_yz: mse_yz(&rep.model.sigma_yz(), &truth.sigma_yz()).unwrap_or(f64::NAN),
                            mse_observed: mse_observed_blocks(&est, &sigma, &exp.partition).unwrap_or(f64::NAN),
                            iterations: rep.iterations,
                            converged: rep.converged,
                            final_loglik: rep.final_loglik,
                            max_decrease: rep.max_decrease(),
                            error: None,
                        }
                    }
                    Err(e) => IdentifiabilityRecord {
                        q,
                        seed_index: s,
                        mse_yz: f64::NAN,
                        mse_observed: f64::NAN,
                        iterations: 0,
                        converged: false,
                        final_loglik: f64::NAN,
                        max_decrease: f64::NAN,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        out.extend(records);
    }
    Ok(out)
}

/// `n` complete rows drawn from the model's full covariance.
pub fn sample_complete(model: &FactorModel, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_gaussian(&model.implied_full(), n, seed, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Factor model fitted by EM from random starts.
    Fm,
    Cia,
    Als,
    SoftImpute,
    SvdImpute,
    /// Factor model fitted to the complete data.
    Complete,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Fm, Method::Cia, Method::Als, Method::SoftImpute, Method::SvdImpute, Method::Complete];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fm => "fm",
            Method::Cia => "cia",
            Method::Als => "als",
            Method::SoftImpute => "softimpute",
            Method::SvdImpute => "svdimpute",
            Method::Complete => "complete",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub p_x: usize,
    pub p_y: usize,
    pub p_z: usize,
    /// Leading rows that form dataset A; the rest form dataset B.
    pub n_a: usize,
    pub q: usize,
    pub methods: Vec<Method>,
    pub n_perms: usize,
    pub seed: u64,
    pub em: EmConfig,
    pub als: AlsOptions,
    pub soft: SoftImputeOptions,
}

impl BenchmarkConfig {
    pub fn new(p_x: usize, p_y: usize, p_z: usize, n_a: usize, q: usize) -> Self {
        Self {
            p_x,
            p_y,
            p_z,
            n_a,
            q,
            methods: vec![Method::Fm, Method::Cia, Method::Als, Method::SoftImpute],
            n_perms: 100,
            seed: rng::DEFAULT_SEED,
            em: EmConfig::default(),
            als: AlsOptions::default(),
            soft: SoftImputeOptions::default(),
        }
    }

    pub fn partition(&self) -> Result<PartitionSpec> {
        PartitionSpec::new(self.p_x, self.p_y, self.p_z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub permutation: usize,
    pub method: Method,
    /// `NaN` when the method failed.
    pub mse_yz: f64,
    pub runtime_secs: f64,
    pub converged: bool,
    /// Largest one-step log-likelihood drop, for the EM-based methods.
    pub max_decrease: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub succeeded: usize,
    pub failed: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl MethodSummary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub records: Vec<BenchmarkRecord>,
    pub methods: Vec<Method>,
}

/// Sample quantile with linear interpolation between order statistics
/// (`x[(n−1)p]`). Input must be sorted.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BenchmarkResult {
    /// Per-method median and quartiles over the successful replicates.
    pub fn summary(&self) -> Vec<MethodSummary> {
        self.methods
            .iter()
            .map(|&m| {
                let mut vals: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.method == m && r.error.is_none())
                    .map(|r| r.mse_yz)
                    .collect();
                vals.sort_by(f64::total_cmp);
                let failed = self.records.iter().filter(|r| r.method == m && r.error.is_some()).count();
                MethodSummary {
                    method: m,
                    succeeded: vals.len(),
                    failed,
                    median: quantile_sorted(&vals, 0.5),
                    q1: quantile_sorted(&vals, 0.25),
                    q3: quantile_sorted(&vals, 0.75),
                }
            })
            .collect()
    }

    pub fn summary_for(&self, method: Method) -> Option<MethodSummary> {
        self.summary().into_iter().find(|s| s.method == method)
    }

    /// One row per replicate and method; runtimes only on request so the
    /// default output depends on the seed alone.
    pub fn write_records_csv<W: Write>(&self, out: W, include_runtime: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["permutation", "method", "mse_yz", "converged", "error"];
        if include_runtime {
            header.push("runtime_secs");
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.permutation.to_string(),
                r.method.to_string(),
                r.mse_yz.to_string(),
                r.converged.to_string(),
                r.error.clone().unwrap_or_default(),
            ];
            if include_runtime {
                row.push(r.runtime_secs.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "succeeded", "failed", "median", "q1", "q3", "iqr"])?;
        for s in self.summary() {
            w.write_record([
                s.method.to_string(),
                s.succeeded.to_string(),
                s.failed.to_string(),
                s.median.to_string(),
                s.q1.to_string(),
                s.q3.to_string(),
                s.iqr().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One replicate's split of the complete data.
#[derive(Debug, Clone)]
pub struct PermutedSplit {
    pub partition: PartitionSpec,
    /// Original column index of every `(X, Y, Z)` position.
    pub columns: Vec<usize>,
    pub data_a: DMatrix<f64>,
    pub data_b: DMatrix<f64>,
    /// The complete data in the permuted column order.
    pub complete: DMatrix<f64>,
}

/// Shuffle the columns into `(X, Y, Z)` groups, then split the rows.
pub fn permuted_split(
    data: &DMatrix<f64>,
    partition: &PartitionSpec,
    n_a: usize,
    seed: u64,
    replicate: usize,
) -> Result<PermutedSplit> {
    partition.validate()?;
    let partition = partition.clone();
    let p = partition.p();
    if data.ncols() != p {
        return Err(Error::DimensionMismatch(format!("data has {} columns, partition needs {p}", data.ncols())));
    }
    if n_a == 0 || n_a >= data.nrows() {
        return Err(Error::InvalidArgument(format!("n_A = {n_a} must leave rows for both files")));
    }
    let mut g = rng::stream(seed, replicate as u64);
    let columns = rng::permutation(&mut g, p);
    let complete = select_cols(data, &columns);
    let rows_a: Vec<usize> = (0..n_a).collect();
    let rows_b: Vec<usize> = (n_a..data.nrows()).collect();
    let data_a = select_cols(&select_rows(&complete, &rows_a), &partition.a_idx());
    let data_b = select_cols(&select_rows(&complete, &rows_b), &partition.b_idx());
    Ok(PermutedSplit { partition, columns, data_a, data_b, complete })
}

fn centred(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    center_columns(&mut c);
    c
}

struct Fitted {
    converged: bool,
    max_decrease: Option<f64>,
}

impl Fitted {
    fn em(rep: &FitReport) -> Self {
        Self { converged: rep.converged, max_decrease: Some(rep.max_decrease()) }
    }

    fn other(converged: bool) -> Self {
        Self { converged, max_decrease: None }
    }
}

fn run_method(
    method: Method,
    split: &PermutedSplit,
    scatter: &ObservedScatter,
    stacked: &StackedData,
    config: &BenchmarkConfig,
    replicate: usize,
) -> Result<(DMatrix<f64>, Fitted)> {
    let em_cfg = EmConfig { seed: rng::child_seed(config.em.seed, replicate as u64), ..config.em.clone() };
    match method {
        Method::Fm => {
            let rep = em::fit(scatter, config.q, &em_cfg)?;
            Ok((rep.model.sigma_yz(), Fitted::em(&rep)))
        }
        Method::Cia => Ok((baselines::cia_estimate(&PartialCovariance::from_scatter(scatter)?)?, Fitted::other(true))),
        Method::Als => {
            let imp = baselines::als_stacked(stacked, config.q, &config.als)?;
            Ok((baselines::covariance_from_imputed(&imp), Fitted::other(imp.converged)))
        }
        Method::SoftImpute => {
            let opts = SoftImputeOptions { seed: rng::child_seed(config.soft.seed, replicate as u64), ..config.soft.clone() };
            let imp = baselines::soft_impute_stacked(stacked, &opts)?;
            Ok((baselines::covariance_from_imputed(&imp), Fitted::other(imp.converged)))
        }
        Method::SvdImpute => {
            let imp = baselines::svd_impute_stacked(stacked, config.q, &config.als)?;
            Ok((baselines::covariance_from_imputed(&imp), Fitted::other(imp.converged)))
        }
        Method::Complete => {
            let full = centred(&split.complete);
            let rep = em::fit_complete(&split.partition, &scatter_of(&full), full.nrows(), config.q, &em_cfg)?;
            Ok((rep.model.sigma_yz(), Fitted::em(&rep)))
        }
    }
}

/// Score every method on `n_perms` random column allocations of `data`
/// against the complete-data sample `Σ_YZ`.
pub fn run_permutation_benchmark(data: &DMatrix<f64>, config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    if config.methods.is_empty() || config.n_perms == 0 {
        return Err(Error::InvalidArgument("need at least one method and one permutation".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("benchmark data".into()));
    }
    permuted_split(data, &config.partition()?, config.n_a, config.seed, 0)?;
    let per_replicate: Vec<Vec<BenchmarkRecord>> = (0..config.n_perms)
        .into_par_iter()
        .map(|r| replicate_records(data, config, r))
        .collect();
    Ok(BenchmarkResult { records: per_replicate.into_iter().flatten().collect(), methods: config.methods.clone() })
}

fn replicate_records(data: &DMatrix<f64>, config: &BenchmarkConfig, r: usize) -> Vec<BenchmarkRecord> {
    let fail = |method: Method, e: Error| BenchmarkRecord {
        permutation: r,
        method,
        mse_yz: f64::NAN,
        runtime_secs: 0.0,
        converged: false,
        max_decrease: None,
        error: Some(e.to_string()),
    };
    let prepared = config.partition().and_then(|part| permuted_split(data, &part, config.n_a, config.seed, r)).and_then(|split| {
        let a = centred(&split.data_a);
        let b = centred(&split.data_b);
        let scatter = ObservedScatter::new(split.partition.clone(), scatter_of(&a), scatter_of(&b), a.nrows(), b.nrows())?;
        let stacked = StackedData::new(&split.partition, &a, &b)?;
        let part = &split.partition;
        let truth = baselines::cross_covariance(
            &select_cols(&split.complete, &part.y_idx()),
            &select_cols(&split.complete, &part.z_idx()),
        );
        Ok((split, scatter, stacked, truth))
    });
    let (split, scatter, stacked, truth) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return config.methods.iter().map(|&m| fail(m, Error::InvalidArgument(msg.clone()))).collect();
        }
    };
    config
        .methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let outcome = run_method(method, &split, &scatter, &stacked, config, r)
                .and_then(|(est, fitted)| Ok((mse_yz(&est, &truth)?, fitted)));
            let runtime_secs = start.elapsed().as_secs_f64();
            match outcome {
                Ok((mse, fitted)) if mse.is_finite() => BenchmarkRecord {
                    permutation: r,
                    method,
                    mse_yz: mse,
                    runtime_secs,
                    converged: fitted.converged,
                    max_decrease: fitted.max_decrease,
                    error: None,
                },
                Ok(_) => fail(method, Error::NonFinite("estimate".into())),
                Err(e) => {
                    log::warn!("replicate {r}, {method}: {e}");
                    fail(method, e)
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionExperiment {
    pub partition: PartitionSpec,
    pub n_a: usize,
    pub q_range: std::ops::RangeInclusive<usize>,
    pub n_perms: usize,
    pub seed: u64,
    pub em: EmConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub permutation: usize,
    pub selected: Option<usize>,
    pub table: crate::selection::BicTable,
}

/// BIC choice of `q` on `n_perms` random column allocations of `data`.
pub fn run_selection_experiment(data: &DMatrix<f64>, exp: &SelectionExperiment) -> Result<Vec<SelectionRecord>> {
    permuted_split(data, &exp.partition, exp.n_a, exp.seed, 0)?;
    (0..exp.n_perms)
        .into_par_iter()
        .map(|r| {
            let split = permuted_split(data, &exp.partition, exp.n_a, exp.seed, r)?;
            let a = centred(&split.data_a);
            let b = centred(&split.data_b);
            let scatter = ObservedScatter::new(split.partition.clone(), scatter_of(&a), scatter_of(&b), a.nrows(), b.nrows())?;
            let cfg = EmConfig { seed: rng::child_seed(exp.em.seed, r as u64), ..exp.em.clone() };
            let table = crate::selection::select_q(&scatter, exp.q_range.clone(), &cfg)?;
            Ok(SelectionRecord { permutation: r, selected: table.selected(), table })
        })
        .collect()
}

/// Long format: one row per replicate and candidate `q`.
pub fn write_selection_csv<W: Write>(records: &[SelectionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["permutation", "q", "loglik", "bic", "converged", "selected"])?;
    for rec in records {
        for row in &rec.table.rows {
            w.write_record([
                rec.permutation.to_string(),
                row.q.to_string(),
                row.loglik.map(|v| v.to_string()).unwrap_or_default(),
                row.bic.map(|v| v.to_string()).unwrap_or_default(),
                row.converged.to_string(),
                (rec.selected == Some(row.q)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
