//! Maximum-likelihood factor analysis by EM.
//!
//! The complete-data sufficient statistic is the scatter `S = Σ s sᵀ`. With
//! complete cases it is observed directly. In the file-matching setting the
//! E-step replaces it with `S̃ = P̃ + T̃`, the conditional expectation of `S`
//! given dataset A's `(x, y)` rows and dataset B's `(x, z)` rows under the
//! current parameters. Both cases share the same closed-form M-step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::identifiability;
use crate::linalg::{self, cholesky, log_det_chol, set_submatrix, submatrix};
use crate::rng;
use crate::types::{FactorModel, FitReport, ObservedScatter, PartitionSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Draw `restarts` loading matrices with i.i.d. `N(0, 1)` entries, run
    /// `burn_iters` EM iterations from each and continue from the one with
    /// the highest log-likelihood.
    Random { restarts: usize, burn_iters: usize },
    /// Start from the given model.
    Supplied(FactorModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative log-likelihood change `|Δℓ| / (|ℓ| + 1)` treated as converged.
    pub tol: f64,
    pub seed: u64,
    pub init: Init,
    /// Uniquenesses are floored at this multiple of the largest per-variable
    /// variance in the input.
    pub psi_floor_scale: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-8,
            seed: rng::DEFAULT_SEED,
            init: Init::Random { restarts: 100, burn_iters: 50 },
            psi_floor_scale: 1e-8,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if let Init::Random { restarts, .. } = self.init {
            if restarts == 0 {
                return Err(Error::InvalidArgument("restarts must be at least 1".into()));
            }
        }
        if !(self.psi_floor_scale >= 0.0) {
            return Err(Error::InvalidArgument("psi_floor_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Quantities computed by the file-matching E-step.
#[derive(Debug, Clone)]
pub struct EStepIntermediates {
    /// `Λᵀ (ΛΛᵀ + Ψ)⁻¹`, `q × p`.
    pub beta: DMatrix<f64>,
    /// Regression of `Z` on `(X, Y)`, `p_Z × p_A`.
    pub omega: DMatrix<f64>,
    /// Regression of `Y` on `(X, Z)`, `p_Y × p_B`.
    pub alpha: DMatrix<f64>,
    pub sigma_z_given_xy: DMatrix<f64>,
    pub sigma_y_given_xz: DMatrix<f64>,
    /// Expected dataset-A contribution to the complete scatter, `p × p`.
    pub p_tilde: DMatrix<f64>,
    /// Expected dataset-B contribution to the complete scatter, `p × p`.
    pub t_tilde: DMatrix<f64>,
    /// `P̃ + T̃`.
    pub s_tilde: DMatrix<f64>,
}

fn gaussian_loglik(sigma: &DMatrix<f64>, scatter: &DMatrix<f64>, n: usize, what: &str) -> Result<f64> {
    let chol = cholesky(sigma, what)?;
    let inv_s = chol.solve(scatter);
    let dim = sigma.nrows() as f64;
    let n = n as f64;
    Ok(-0.5 * n * log_det_chol(&chol) - 0.5 * inv_s.trace() - 0.5 * n * dim * LN_2PI)
}

/// `log L_A + log L_B` of the two marginal Gaussian models.
pub fn loglik_observed(model: &FactorModel, scatter: &ObservedScatter) -> Result<f64> {
    check_compatible(model, &scatter.partition)?;
    let sigma = model.implied_full();
    let a = model.partition.a_idx();
    let b = model.partition.b_idx();
    let la = gaussian_loglik(&submatrix(&sigma, &a, &a), &scatter.p, scatter.n_a, "Σ_A")?;
    let lb = gaussian_loglik(&submatrix(&sigma, &b, &b), &scatter.t, scatter.n_b, "Σ_B")?;
    Ok(la + lb)
}

/// Complete-data log-likelihood for a `p × p` scatter over `n` rows.
pub fn loglik_complete(model: &FactorModel, scatter: &DMatrix<f64>, n: usize) -> Result<f64> {
    if scatter.shape() != (model.p(), model.p()) {
        return Err(Error::DimensionMismatch(format!(
            "scatter {:?} for p = {}",
            scatter.shape(),
            model.p()
        )));
    }
    gaussian_loglik(&model.implied_full(), scatter, n, "Σ")
}

fn check_compatible(model: &FactorModel, part: &PartitionSpec) -> Result<()> {
    if model.partition.p_x != part.p_x || model.partition.p_y != part.p_y || model.partition.p_z != part.p_z {
        return Err(Error::DimensionMismatch(format!(
            "model partition ({}, {}, {}) vs data partition ({}, {}, {})",
            model.partition.p_x, model.partition.p_y, model.partition.p_z, part.p_x, part.p_y, part.p_z
        )));
    }
    Ok(())
}

/// `β = Λᵀ (ΛΛᵀ + Ψ)⁻¹`.
pub fn beta(model: &FactorModel) -> Result<DMatrix<f64>> {
    let chol = cholesky(&model.implied_full(), "Σ")?;
    Ok(chol.solve(&model.lambda).transpose())
}

/// Regression of the missing block on an observed marginal.
///
/// Returns `(coef, conditional covariance)` where `coef = Σ_{m,o} Σ_{o,o}⁻¹`.
fn conditional(sigma: &DMatrix<f64>, obs: &[usize], mis: &[usize], what: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s_oo = submatrix(sigma, obs, obs);
    let s_om = submatrix(sigma, obs, mis);
    let s_mm = submatrix(sigma, mis, mis);
    let chol = cholesky(&s_oo, what)?;
    let coef_t = chol.solve(&s_om);
    let cond = linalg::symmetrize(&(s_mm - s_om.transpose() * &coef_t));
    Ok((coef_t.transpose(), cond))
}

/// Augmented scatter of one file: observed block `obs_scatter` on `obs`
/// indices, imputed cross and missing blocks on `mis` indices.
fn augmented(
    p: usize,
    obs: &[usize],
    mis: &[usize],
    obs_scatter: &DMatrix<f64>,
    coef: &DMatrix<f64>,
    cond: &DMatrix<f64>,
    n: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p, p);
    let cross = obs_scatter * coef.transpose();
    let missing = coef * &cross + cond * n as f64;
    set_submatrix(&mut out, obs, obs, obs_scatter);
    set_submatrix(&mut out, obs, mis, &cross);
    set_submatrix(&mut out, mis, obs, &cross.transpose());
    set_submatrix(&mut out, mis, mis, &linalg::symmetrize(&missing));
    out
}

/// File-matching E-step: conditional expectation of the complete scatter.
pub fn estep(model: &FactorModel, scatter: &ObservedScatter) -> Result<EStepIntermediates> {
    check_compatible(model, &scatter.partition)?;
    let part = &model.partition;
    let sigma = model.implied_full();
    let p = part.p();
    let (a, b, y, z) = (part.a_idx(), part.b_idx(), part.y_idx(), part.z_idx());

    let (omega, sigma_z_given_xy) = conditional(&sigma, &a, &z, "Σ_A")?;
    let (alpha, sigma_y_given_xz) = conditional(&sigma, &b, &y, "Σ_B")?;
    let p_tilde = augmented(p, &a, &z, &scatter.p, &omega, &sigma_z_given_xy, scatter.n_a);
    let t_tilde = augmented(p, &b, &y, &scatter.t, &alpha, &sigma_y_given_xz, scatter.n_b);
    let s_tilde = linalg::symmetrize(&(&p_tilde + &t_tilde));
    let beta = cholesky(&sigma, "Σ")?.solve(&model.lambda).transpose();

    Ok(EStepIntermediates {
        beta,
        omega,
        alpha,
        sigma_z_given_xy,
        sigma_y_given_xz,
        p_tilde,
        t_tilde,
        s_tilde,
    })
}

/// Closed-form M-step given an (expected) complete-data scatter.
///
/// `Λ_new = S βᵀ (nI − nβΛ + βSβᵀ)⁻¹` and
/// `Ψ_new = diag(S − Λ_new β S) / n`, floored at `psi_floor`.
pub fn mstep(s_tilde: &DMatrix<f64>, model: &FactorModel, n: usize, psi_floor: f64) -> Result<FactorModel> {
    let p = model.p();
    let q = model.q();
    if s_tilde.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!("S̃ is {:?}, expected ({p}, {p})", s_tilde.shape())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let nf = n as f64;
    let beta = beta(model)?;
    let s_bt = s_tilde * beta.transpose();
    let mut system = &beta * &s_bt - (&beta * &model.lambda) * nf;
    for i in 0..q {
        system[(i, i)] += nf;
    }
    let system = linalg::symmetrize(&system);
    let chol = nalgebra::Cholesky::new(system).ok_or(Error::SingularMStep)?;
    let diag = chol.l_dirty().diagonal();
    if q > 0 && (diag.min() / diag.max()).powi(2) < 1e-14 {
        return Err(Error::SingularMStep);
    }
    // Λ_new = S βᵀ A⁻¹ with A symmetric: solve A Λ_newᵀ = (S βᵀ)ᵀ.
    let lambda_new = chol.solve(&s_bt.transpose()).transpose();
    let beta_s = &beta * s_tilde;
    let psi_new = DVector::from_fn(p, |i, _| {
        let mut v = s_tilde[(i, i)];
        for k in 0..q {
            v -= lambda_new[(i, k)] * beta_s[(k, i)];
        }
        (v / nf).max(psi_floor)
    });
    if lambda_new.iter().chain(psi_new.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("M-step update".into()));
    }
    FactorModel::new(model.partition.clone(), lambda_new, psi_new)
}

/// The two estimation problems share everything except the sufficient
/// statistic and likelihood.
trait Problem: Sync {
    fn partition(&self) -> &PartitionSpec;
    fn n(&self) -> usize;
    fn loglik(&self, model: &FactorModel) -> Result<f64>;
    fn expected_scatter(&self, model: &FactorModel) -> Result<DMatrix<f64>>;
    fn variances(&self) -> DVector<f64>;
    fn psi_floor(&self, scale: f64) -> f64;
}

impl Problem for ObservedScatter {
    fn partition(&self) -> &PartitionSpec {
        &self.partition
    }
    fn n(&self) -> usize {
        self.n_a + self.n_b
    }
    fn loglik(&self, model: &FactorModel) -> Result<f64> {
        loglik_observed(model, self)
    }
    fn expected_scatter(&self, model: &FactorModel) -> Result<DMatrix<f64>> {
        Ok(estep(model, self)?.s_tilde)
    }
    fn variances(&self) -> DVector<f64> {
        self.pooled_variances()
    }
    fn psi_floor(&self, scale: f64) -> f64 {
        ObservedScatter::psi_floor(self, scale)
    }
}

struct CompleteProblem<'a> {
    partition: &'a PartitionSpec,
    scatter: &'a DMatrix<f64>,
    n: usize,
}

impl Problem for CompleteProblem<'_> {
    fn partition(&self) -> &PartitionSpec {
        self.partition
    }
    fn n(&self) -> usize {
        self.n
    }
    fn loglik(&self, model: &FactorModel) -> Result<f64> {
        loglik_complete(model, self.scatter, self.n)
    }
    fn expected_scatter(&self, _model: &FactorModel) -> Result<DMatrix<f64>> {
        Ok(self.scatter.clone())
    }
    fn variances(&self) -> DVector<f64> {
        self.scatter.diagonal() / self.n as f64
    }
    fn psi_floor(&self, scale: f64) -> f64 {
        scale * (self.scatter.diagonal().max() / self.n as f64).max(f64::MIN_POSITIVE)
    }
}

/// Starting uniquenesses: half of each variable's observed variance.
fn initial_psi<P: Problem>(problem: &P, floor: f64) -> DVector<f64> {
    problem.variances().map(|v| (0.5 * v).max(floor))
}

struct RunState {
    model: FactorModel,
    trace: Vec<f64>,
    last: f64,
    converged: bool,
}

/// Run up to `iters` EM iterations, appending to the trace.
fn iterate<P: Problem>(
    problem: &P,
    state: &mut RunState,
    iters: usize,
    tol: f64,
    floor: f64,
    stop_on_convergence: bool,
) -> Result<()> {
    for _ in 0..iters {
        let s = problem.expected_scatter(&state.model)?;
        let next = mstep(&s, &state.model, problem.n(), floor)?;
        let ll = problem.loglik(&next)?;
        if !ll.is_finite() {
            return Err(Error::NonFinite("log-likelihood".into()));
        }
        let rel = (ll - state.last).abs() / (state.last.abs() + 1.0);
        state.model = next;
        state.trace.push(ll);
        state.last = ll;
        if rel < tol {
            state.converged = true;
            if stop_on_convergence {
                break;
            }
        } else {
            state.converged = false;
        }
    }
    Ok(())
}

fn run<P: Problem>(problem: &P, q: usize, config: &EmConfig) -> Result<FitReport> {
    config.validate()?;
    let part = problem.partition().clone();
    let p = part.p();
    if q == 0 || q >= p {
        return Err(Error::InvalidArgument(format!("q = {q} must satisfy 1 ≤ q < p = {p}")));
    }
    if !identifiability::assumption1_dims(&part, q) || !identifiability::assumption2_dims(&part, q) {
        log::warn!(
            "q = {q} violates the identifiability dimension conditions for partition ({}, {}, {})",
            part.p_x,
            part.p_y,
            part.p_z
        );
    }
    let floor = problem.psi_floor(config.psi_floor_scale);

    let start = match &config.init {
        Init::Supplied(model) => {
            check_compatible(model, &part)?;
            if model.q() != q {
                return Err(Error::DimensionMismatch(format!(
                    "supplied model has q = {}, requested q = {q}",
                    model.q()
                )));
            }
            let mut model = model.clone();
            model.psi.iter_mut().for_each(|v| *v = v.max(floor));
            let last = problem.loglik(&model)?;
            RunState { model, trace: Vec::new(), last, converged: false }
        }
        Init::Random { restarts, burn_iters } => {
            let psi0 = initial_psi(problem, floor);
            let candidates: Vec<Result<RunState>> = (0..*restarts)
                .into_par_iter()
                .map(|r| {
                    let mut g = rng::stream(config.seed, r as u64);
                    let lambda = rng::normal_matrix(&mut g, p, q, 0.0, 1.0);
                    let model = FactorModel::new(part.clone(), lambda, psi0.clone())?;
                    let last = problem.loglik(&model)?;
                    let mut st = RunState { model, trace: Vec::new(), last, converged: false };
                    iterate(problem, &mut st, *burn_iters, config.tol, floor, false)?;
                    Ok(st)
                })
                .collect();
            let mut best: Option<RunState> = None;
            let mut first_err = None;
            for c in candidates {
                match c {
                    Ok(st) => {
                        if best.as_ref().is_none_or(|b| st.last > b.last) {
                            best = Some(st);
                        }
                    }
                    Err(e) => {
                        log::debug!("restart failed: {e}");
                        first_err.get_or_insert(e);
                    }
                }
            }
            match best {
                Some(b) => b,
                None => return Err(first_err.expect("at least one restart ran")),
            }
        }
    };

    let mut state = start;
    state.converged = false;
    iterate(problem, &mut state, config.max_iter, config.tol, floor, true)?;
    let seed = matches!(config.init, Init::Random { .. }).then_some(config.seed);
    Ok(FitReport {
        iterations: state.trace.len(),
        final_loglik: state.last,
        converged: state.converged,
        loglik_trace: state.trace,
        model: state.model,
        seed,
    })
}

/// Fit a `q`-factor model to the two half-observed files.
pub fn fit(scatter: &ObservedScatter, q: usize, config: &EmConfig) -> Result<FitReport> {
    run(scatter, q, config)
}

/// Fit a `q`-factor model to a complete-data scatter over `n` rows.
pub fn fit_complete(
    partition: &PartitionSpec,
    scatter: &DMatrix<f64>,
    n: usize,
    q: usize,
    config: &EmConfig,
) -> Result<FitReport> {
    let p = partition.p();
    if scatter.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!("scatter {:?} for p = {p}", scatter.shape())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let problem = CompleteProblem { partition, scatter, n };
    run(&problem, q, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ObservedScatter;

    fn part(px: usize, py: usize, pz: usize) -> PartitionSpec {
        PartitionSpec::new(px, py, pz).unwrap()
    }

    fn random_model(pt: &PartitionSpec, q: usize, seed: u64) -> FactorModel {
        let mut g = rng::stream(seed, 0);
        let lambda = rng::normal_matrix(&mut g, pt.p(), q, 0.0, 1.0);
        let psi = DVector::from_fn(pt.p(), |i, _| 0.3 + 0.1 * (i % 4) as f64);
        FactorModel::new(pt.clone(), lambda, psi).unwrap()
    }

    #[test]
    fn identity_loglik_closed_form() {
        let pt = part(2, 1, 3);
        let m = FactorModel::new(pt.clone(), DMatrix::zeros(6, 1), DVector::from_element(6, 1.0)).unwrap();
        let (na, nb) = (7, 11);
        let sc = ObservedScatter::new(
            pt.clone(),
            DMatrix::identity(3, 3) * na as f64,
            DMatrix::identity(5, 5) * nb as f64,
            na,
            nb,
        )
        .unwrap();
        let want = -((na * 3 + nb * 5) as f64) / 2.0 * (1.0 + LN_2PI);
        assert!((loglik_observed(&m, &sc).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn loglik_matches_explicit_determinant() {
        let pt = part(2, 2, 1);
        let m = random_model(&pt, 2, 3);
        let truth = random_model(&pt, 2, 4);
        let sc = ObservedScatter::from_model(&truth, 40, 25).unwrap();
        let got = loglik_observed(&m, &sc).unwrap();
        let dense = |sig: DMatrix<f64>, s: &DMatrix<f64>, n: usize| {
            let d = sig.nrows() as f64;
            let inv = sig.clone().try_inverse().unwrap();
            -(n as f64) / 2.0 * sig.determinant().ln() - 0.5 * (inv * s).trace()
                - n as f64 * d / 2.0 * (2.0 * std::f64::consts::PI).ln()
        };
        let want = dense(m.sigma_a(), &sc.p, 40) + dense(m.sigma_b(), &sc.t, 25);
        assert!((got - want).abs() < 1e-9 * want.abs());
    }

    #[test]
    fn loglik_scaling() {
        let pt = part(2, 2, 2);
        let m = random_model(&pt, 1, 5);
        let sc = ObservedScatter::from_model(&random_model(&pt, 1, 6), 30, 20).unwrap();
        let doubled = ObservedScatter::new(pt, &sc.p * 2.0, &sc.t * 2.0, 60, 40).unwrap();
        let l1 = loglik_observed(&m, &sc).unwrap();
        let l2 = loglik_observed(&m, &doubled).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-9 * l1.abs());
    }

    #[test]
    fn estep_independence_case() {
        let pt = part(2, 2, 2);
        let psi = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = FactorModel::new(pt.clone(), DMatrix::zeros(6, 1), psi).unwrap();
        let sc = ObservedScatter::from_model(&random_model(&pt, 1, 9), 10, 20).unwrap();
        let e = estep(&m, &sc).unwrap();
        assert!(e.omega.amax() == 0.0 && e.alpha.amax() == 0.0);
        assert_eq!(e.sigma_z_given_xy, DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 6.0])));
        assert_eq!(e.sigma_y_given_xz, DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 4.0])));
        // Y-Z cross block is empty; Z diagonal in P̃ is n_A Ψ_Z.
        assert_eq!(e.s_tilde[(2, 4)], 0.0);
        assert_eq!(e.p_tilde[(4, 4)], 50.0);
        assert_eq!(e.t_tilde[(3, 3)], 80.0);
    }

    #[test]
    fn conditional_covariance_is_schur_complement() {
        let pt = part(2, 1, 2);
        let m = random_model(&pt, 2, 12);
        let sc = ObservedScatter::from_model(&m, 5, 5).unwrap();
        let e = estep(&m, &sc).unwrap();
        let s = m.implied_full();
        let inv = s.clone().try_inverse().unwrap();
        // Σ_{Z|XY} = ((Σ⁻¹)_{ZZ})⁻¹.
        let z = pt.z_idx();
        let want = submatrix(&inv, &z, &z).try_inverse().unwrap();
        assert!((&e.sigma_z_given_xy - want).amax() < 1e-10);
    }

    #[test]
    fn mstep_fixed_point_at_exact_scatter() {
        let pt = part(3, 2, 2);
        let m = random_model(&pt, 2, 21);
        let n = 50;
        let s = m.implied_full() * n as f64;
        let next = mstep(&s, &m, n, 0.0).unwrap();
        let g0 = &m.lambda * m.lambda.transpose();
        let g1 = &next.lambda * next.lambda.transpose();
        assert!((g0 - g1).amax() < 1e-10);
        assert!((&m.psi - &next.psi).amax() < 1e-10);
    }

    #[test]
    fn mstep_scalar_formula() {
        let pt = part(1, 1, 1);
        // p = 3 but test the scalar algebra on a diagonal problem: one factor
        // loading only on the first variable.
        let lambda = DMatrix::from_column_slice(3, 1, &[1.5, 0.0, 0.0]);
        let psi = DVector::from_vec(vec![0.7, 1.0, 1.0]);
        let m = FactorModel::new(pt, lambda, psi).unwrap();
        let (n, s11) = (10usize, 37.0);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![s11, 10.0, 10.0]));
        let next = mstep(&s, &m, n, 0.0).unwrap();
        let (l, ps, nf) = (1.5, 0.7, n as f64);
        let b = l / (l * l + ps);
        let l_new = s11 * b / (nf - nf * b * l + b * b * s11);
        let psi_new = (s11 - l_new * b * s11) / nf;
        assert!((next.lambda[(0, 0)] - l_new).abs() < 1e-12);
        assert!((next.psi[0] - psi_new).abs() < 1e-12);
    }

    #[test]
    fn mstep_respects_floor() {
        let pt = part(1, 1, 1);
        let m = random_model(&pt, 1, 2);
        let s = DMatrix::zeros(3, 3);
        let next = mstep(&s, &m, 5, 0.25).unwrap();
        assert!(next.psi.iter().all(|&v| v >= 0.25));
    }

    #[test]
    fn config_validation() {
        let mut c = EmConfig::default();
        c.max_iter = 0;
        assert!(c.validate().is_err());
        let mut c = EmConfig::default();
        c.init = Init::Random { restarts: 0, burn_iters: 1 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn fit_rejects_q_zero() {
        let pt = part(2, 2, 2);
        let sc = ObservedScatter::from_model(&random_model(&pt, 1, 1), 10, 10).unwrap();
        assert!(fit(&sc, 0, &EmConfig::default()).is_err());
    }
}
