use filematch::em::{self, EmConfig, Init};
use filematch::linalg::{submatrix, select_cols};
use filematch::rng;
use filematch::simulate::{sample_datasets, sample_gaussian};
use filematch::{FactorModel, ObservedScatter, PartitionSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random_model(part: &PartitionSpec, q: usize, seed: u64) -> FactorModel {
    let mut g = rng::stream(seed, 0);
    let lambda = rng::normal_matrix(&mut g, part.p(), q, 0.0, 1.0);
    let raw = rng::normal_matrix(&mut g, part.p(), 1, 0.0, 1.0);
    let psi = DVector::from_fn(part.p(), |i, _| 0.2 + raw[(i, 0)].abs());
    FactorModel::new(part.clone(), lambda, psi).unwrap()
}

/// `E[s sᵀ | observed]` summed over rows, from the precision matrix.
fn brute_conditional_scatter(sigma: &DMatrix<f64>, rows: &DMatrix<f64>, obs: &[usize], mis: &[usize]) -> DMatrix<f64> {
    let p = sigma.nrows();
    let k = sigma.clone().try_inverse().unwrap();
    let k_mm = submatrix(&k, mis, mis);
    let k_mo = submatrix(&k, mis, obs);
    let cond_cov = k_mm.clone().try_inverse().unwrap();
    let mut out = DMatrix::zeros(p, p);
    for r in 0..rows.nrows() {
        let o = rows.row(r).transpose();
        let mean_mis = -(&cond_cov * &k_mo * &o);
        let mut full = DVector::zeros(p);
        for (k, &i) in obs.iter().enumerate() {
            full[i] = o[k];
        }
        for (k, &i) in mis.iter().enumerate() {
            full[i] = mean_mis[k];
        }
        out += &full * full.transpose();
        for (a, &i) in mis.iter().enumerate() {
            for (b, &j) in mis.iter().enumerate() {
                out[(i, j)] += cond_cov[(a, b)];
            }
        }
    }
    out
}

#[test]
fn estep_matches_bruteforce_conditional_expectation() {
    let mut worst: f64 = 0.0;
    for inst in 0..50u64 {
        let mut g = rng::stream(1000 + inst, 0);
        let sizes = rng::normal_matrix(&mut g, 3, 1, 0.0, 1.0);
        let pick = |v: f64, max: usize| 1 + ((v.abs() * 10.0) as usize) % max;
        let part = PartitionSpec::new(pick(sizes[(0, 0)], 3), pick(sizes[(1, 0)], 3), pick(sizes[(2, 0)], 3)).unwrap();
        let q = 1 + (inst as usize % 2);
        let model = random_model(&part, q, 2000 + inst);
        let truth = random_model(&part, q, 3000 + inst);
        let (n_a, n_b) = (4 + inst as usize % 5, 3 + inst as usize % 4);
        let rows_a = sample_gaussian(&truth.sigma_a(), n_a, 4000 + inst, 0).unwrap();
        let rows_b = sample_gaussian(&truth.sigma_b(), n_b, 4000 + inst, 1).unwrap();
        let scatter = ObservedScatter::new(
            part.clone(),
            rows_a.transpose() * &rows_a,
            rows_b.transpose() * &rows_b,
            n_a,
            n_b,
        )
        .unwrap();
        let e = em::estep(&model, &scatter).unwrap();
        let sigma = model.implied_full();
        let want_p = brute_conditional_scatter(&sigma, &rows_a, &part.a_idx(), &part.z_idx());
        let want_t = brute_conditional_scatter(&sigma, &rows_b, &part.b_idx(), &part.y_idx());
        let err = (&e.p_tilde - &want_p).amax().max((&e.t_tilde - &want_t).amax());
        let err_s = (&e.s_tilde - (&want_p + &want_t)).amax();
        worst = worst.max(err).max(err_s);
        assert!(err < 1e-10 && err_s < 1e-10, "instance {inst}: {err:e} {err_s:e}");
    }
    println!("worst E-step deviation {worst:e}");
}

#[test]
fn beta_matches_dense_inverse() {
    let part = PartitionSpec::new(2, 3, 2).unwrap();
    let m = random_model(&part, 2, 5);
    let b = em::beta(&m).unwrap();
    let dense = m.lambda.transpose() * m.implied_full().try_inverse().unwrap();
    assert!((b - dense).amax() < 1e-12);
}

fn tight(init: Init) -> EmConfig {
    EmConfig { max_iter: 50_000, tol: 1e-15, init, ..Default::default() }
}

#[test]
fn converged_fit_is_stationary() {
    let part = PartitionSpec::new(1, 1, 1).unwrap();
    let truth = FactorModel::new(
        part.clone(),
        DMatrix::from_column_slice(3, 1, &[1.0, 0.8, 0.9]),
        DVector::from_vec(vec![0.5, 0.6, 0.4]),
    )
    .unwrap();
    let data = sample_datasets(&truth, 400, 300, 17).unwrap();
    let rep = em::fit(&data.scatter, 1, &tight(Init::Supplied(truth.clone()))).unwrap();
    let m = &rep.model;
    assert!(m.psi.min() > 1e-3, "boundary solution {:?}", m.psi);
    let ll = |lambda: &DMatrix<f64>, psi: &DVector<f64>| {
        em::loglik_observed(&FactorModel::new(part.clone(), lambda.clone(), psi.clone()).unwrap(), &data.scatter).unwrap()
    };
    let h = 1e-6;
    for i in 0..3 {
        let mut up = m.lambda.clone();
        let mut dn = m.lambda.clone();
        up[(i, 0)] += h;
        dn[(i, 0)] -= h;
        let g = (ll(&up, &m.psi) - ll(&dn, &m.psi)) / (2.0 * h);
        assert!(g.abs() < 1e-3, "dℓ/dλ_{i} = {g}");
        let mut up = m.psi.clone();
        let mut dn = m.psi.clone();
        up[i] += h;
        dn[i] -= h;
        let g = (ll(&m.lambda, &up) - ll(&m.lambda, &dn)) / (2.0 * h);
        assert!(g.abs() < 1e-3, "dℓ/dψ_{i} = {g}");
    }
}

#[test]
fn white_complete_scatter_fits_identity() {
    let part = PartitionSpec::new(2, 2, 2).unwrap();
    let n = 250;
    let s = DMatrix::identity(6, 6) * n as f64;
    let rep = em::fit_complete(&part, &s, n, 1, &tight(Init::Random { restarts: 3, burn_iters: 10 })).unwrap();
    assert!((rep.model.implied_full() - DMatrix::identity(6, 6)).amax() < 1e-6);
    assert!(rep.max_decrease() <= 1e-8);
}

#[test]
fn population_exact_recovery() {
    let part = PartitionSpec::new(4, 4, 4).unwrap();
    let truth = random_model(&part, 2, 21);
    let scatter = ObservedScatter::from_model(&truth, 500, 700).unwrap();
    let cfg = EmConfig { init: Init::Random { restarts: 4, burn_iters: 20 }, max_iter: 20_000, tol: 1e-15, ..Default::default() };
    let rep = em::fit(&scatter, 2, &cfg).unwrap();
    // the likelihood is flat to rounding near the optimum, so Σ is only pinned to ~1e-5
    let best = em::loglik_observed(&truth, &scatter).unwrap();
    assert!((rep.final_loglik - best).abs() < 1e-9 * best.abs());
    let err = (rep.model.implied_full() - truth.implied_full()).amax();
    assert!(err < 1e-4, "error {err:e}, converged {}, iterations {}", rep.converged, rep.iterations);
    assert!(rep.max_decrease() <= 1e-8);
}

#[test]
fn fit_complete_recovers_population() {
    let part = PartitionSpec::new(3, 3, 3).unwrap();
    let truth = random_model(&part, 2, 22);
    let s = truth.implied_full() * 300.0;
    let cfg = EmConfig { init: Init::Random { restarts: 3, burn_iters: 20 }, max_iter: 20_000, tol: 1e-15, ..Default::default() };
    let rep = em::fit_complete(&part, &s, 300, 2, &cfg).unwrap();
    assert!((rep.model.implied_full() - truth.implied_full()).amax() < 1e-5);
}

#[test]
fn fits_are_bit_identical_across_runs() {
    let part = PartitionSpec::new(3, 2, 3).unwrap();
    let truth = random_model(&part, 2, 30);
    let data = sample_datasets(&truth, 80, 90, 31).unwrap();
    let cfg = EmConfig { init: Init::Random { restarts: 8, burn_iters: 10 }, max_iter: 200, seed: 99, ..Default::default() };
    let a = em::fit(&data.scatter, 2, &cfg).unwrap();
    let b = em::fit(&data.scatter, 2, &cfg).unwrap();
    assert_eq!(a, b);
    let bits = |r: &filematch::FitReport| r.loglik_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.seed, Some(99));
    let other = em::fit(&data.scatter, 2, &EmConfig { seed: 100, ..cfg }).unwrap();
    assert_ne!(a.loglik_trace, other.loglik_trace);
}

#[test]
fn restart_count_does_not_lower_the_winner() {
    let part = PartitionSpec::new(3, 3, 3).unwrap();
    let truth = random_model(&part, 2, 40);
    let data = sample_datasets(&truth, 100, 100, 41).unwrap();
    let one = EmConfig { init: Init::Random { restarts: 1, burn_iters: 30 }, max_iter: 1, ..Default::default() };
    let many = EmConfig { init: Init::Random { restarts: 10, burn_iters: 30 }, ..one.clone() };
    let a = em::fit(&data.scatter, 2, &one).unwrap();
    let b = em::fit(&data.scatter, 2, &many).unwrap();
    assert!(b.final_loglik >= a.final_loglik);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loglik_is_rotation_invariant(seed in 0u64..10_000, angle in 0.0f64..std::f64::consts::TAU) {
        let part = PartitionSpec::new(2, 2, 2).unwrap();
        let m = random_model(&part, 2, seed);
        let data = ObservedScatter::from_model(&random_model(&part, 2, seed + 1), 50, 60).unwrap();
        let (s, c) = angle.sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let rotated = FactorModel::new(part.clone(), &m.lambda * r, m.psi.clone()).unwrap();
        let l1 = em::loglik_observed(&m, &data).unwrap();
        let l2 = em::loglik_observed(&rotated, &data).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-9, "{} vs {}", l1, l2);
    }

    #[test]
    fn em_trace_is_monotone(seed in 0u64..10_000) {
        let part = PartitionSpec::new(2, 3, 2).unwrap();
        let truth = random_model(&part, 1, seed);
        let data = sample_datasets(&truth, 40, 30, seed + 7).unwrap();
        let cfg = EmConfig { init: Init::Random { restarts: 2, burn_iters: 5 }, max_iter: 200, seed, ..Default::default() };
        let rep = em::fit(&data.scatter, 2, &cfg).unwrap();
        prop_assert!(rep.max_decrease() <= 1e-8);
        prop_assert_eq!(rep.iterations, rep.loglik_trace.len());
    }

    #[test]
    fn observed_blocks_of_estep_are_the_data(seed in 0u64..10_000) {
        let part = PartitionSpec::new(2, 1, 2).unwrap();
        let m = random_model(&part, 1, seed);
        let sc = ObservedScatter::from_model(&random_model(&part, 2, seed + 3), 9, 13).unwrap();
        let e = em::estep(&m, &sc).unwrap();
        let a = part.a_idx();
        let b = part.b_idx();
        prop_assert_eq!(submatrix(&e.p_tilde, &a, &a), sc.p.clone());
        prop_assert_eq!(submatrix(&e.t_tilde, &b, &b), sc.t.clone());
        let _ = select_cols(&e.s_tilde, &a);
    }
}
