use std::fmt;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;

use filematch::em::{self, EmConfig, Init};
use filematch::gram::complete_gram;
use filematch::identifiability::{max_factors, Criterion, IdentifiabilityReport};
use filematch::ingest::{self, DatasetPair, SavedModel, SharedColumns, Table};
use filematch::linalg::submatrix;
use filematch::rng::child_seed;
use filematch::selection::select_q;
use filematch::simulate::{self, BenchmarkConfig, Method, SimDesign};
use filematch::{FactorModel, ObservedScatter, PartialCovariance, PartitionSpec};

use crate::output::{create, sink, write_labeled, write_trace};
use crate::{
    BenchmarkArgs, CheckArgs, CompleteArgs, CompleteMode, DataArgs, EmArgs, FitArgs, Format, Global, SelectArgs,
    SimulateArgs,
};

/// Bad flags or inputs; exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Every benchmark run failed; exit code 1.
#[derive(Debug)]
struct TotalFailure;

impl fmt::Display for TotalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("every method failed on every permutation")
    }
}

impl std::error::Error for TotalFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<TotalFailure>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<filematch::Error>() {
            return if e.is_numerical() { 1 } else { 2 };
        }
    }
    2
}

impl EmArgs {
    fn config(&self, seed: u64, start: Option<FactorModel>) -> EmConfig {
        EmConfig {
            max_iter: self.max_iter,
            tol: self.tol,
            seed,
            init: match start {
                Some(m) => Init::Supplied(m),
                None => Init::Random { restarts: self.restarts, burn_iters: self.burn },
            },
            psi_floor_scale: self.psi_floor,
        }
    }
}

fn labels(part: &PartitionSpec) -> Vec<String> {
    part.labels.clone().unwrap_or_else(|| {
        let name = |prefix: &'static str, n: usize| (1..=n).map(move |i| format!("{prefix}{i}"));
        name("x", part.p_x).chain(name("y", part.p_y)).chain(name("z", part.p_z)).collect()
    })
}

fn pick(all: &[String], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| all[i].clone()).collect()
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn opt_yes_no(b: Option<bool>) -> &'static str {
    b.map_or("n/a", yes_no)
}

fn shared(names: &Option<Vec<String>>) -> SharedColumns {
    match names {
        Some(v) => SharedColumns::Named(v.iter().map(|s| s.trim().to_string()).collect()),
        None => SharedColumns::Auto,
    }
}

fn load_scatter(d: &DataArgs) -> Result<(DatasetPair, ObservedScatter)> {
    let pair = ingest::load_pair(&d.file_a, &d.file_b, &shared(&d.shared))
        .with_context(|| format!("reading {} and {}", d.file_a.display(), d.file_b.display()))?;
    let scatter = ingest::to_scatter(&pair, d.center.into(), d.scale.into())?;
    Ok((pair, scatter))
}

pub fn check(g: &Global, a: &CheckArgs) -> Result<()> {
    let (part, q, model) = match &a.model {
        Some(path) => {
            let saved = ingest::load_model(path).with_context(|| format!("reading {}", path.display()))?;
            let q = a.q.unwrap_or(saved.model.q());
            if q != saved.model.q() {
                return Err(usage(format!("--q {q} differs from the model's q = {}", saved.model.q())));
            }
            (saved.model.partition.clone(), q, Some(saved.model))
        }
        None => {
            let (px, py, pz) = (a.px.unwrap_or(0), a.py.unwrap_or(0), a.pz.unwrap_or(0));
            let q = a.q.unwrap_or(0);
            let part = PartitionSpec::new(px, py, pz)?;
            if q == 0 {
                return Err(usage("--q must be at least 1"));
            }
            (part, q, None)
        }
    };
    let r = IdentifiabilityReport::new(&part, q, model.as_ref());
    let (px, py, pz) = (part.p_x, part.p_y, part.p_z);
    let fmt_dof = |c: Option<i64>| c.map_or("n/a".to_string(), |v| v.to_string());
    let mut out = sink(g.output.as_deref())?;
    match a.format {
        Format::Text => {
            writeln!(out, "partition           p_X={px} p_Y={py} p_Z={pz} (p={})", part.p())?;
            writeln!(out, "factors             {q}")?;
            writeln!(out, "C                   {:<6} nonnegative: {}", fmt_dof(r.c), yes_no(r.c_nonnegative()))?;
            writeln!(out, "C_M                 {:<6} nonnegative: {}", fmt_dof(r.c_m), yes_no(r.c_m_nonnegative()))?;
            writeln!(out, "assumption 1 (dims) {}", yes_no(r.assumption1_dim_ok))?;
            writeln!(out, "assumption 2 (dims) {}", yes_no(r.assumption2_dim_ok))?;
            if model.is_some() {
                writeln!(out, "assumption 1 (rank) {}", opt_yes_no(r.numeric_assumption1))?;
                writeln!(out, "assumption 2 (rank) {}", opt_yes_no(r.numeric_assumption2))?;
            }
            writeln!(
                out,
                "largest q           C: {}  C_M: {}  assumption 2: {}",
                max_factors(px, py, pz, Criterion::Complete),
                max_factors(px, py, pz, Criterion::Matching),
                max_factors(px, py, pz, Criterion::Assumption2)
            )?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "p_x",
                "p_y",
                "p_z",
                "q",
                "c",
                "c_m",
                "c_nonnegative",
                "c_m_nonnegative",
                "assumption1_dims",
                "assumption2_dims",
                "assumption1_rank",
                "assumption2_rank",
            ])?;
            w.write_record([
                px.to_string(),
                py.to_string(),
                pz.to_string(),
                q.to_string(),
                fmt_dof(r.c),
                fmt_dof(r.c_m),
                yes_no(r.c_nonnegative()).into(),
                yes_no(r.c_m_nonnegative()).into(),
                yes_no(r.assumption1_dim_ok).into(),
                yes_no(r.assumption2_dim_ok).into(),
                opt_yes_no(r.numeric_assumption1).into(),
                opt_yes_no(r.numeric_assumption2).into(),
            ])?;
            w.flush()?;
            return Ok(());
        }
    }
    out.flush()?;
    Ok(())
}

pub fn fit(g: &Global, a: &FitArgs) -> Result<()> {
    let (pair, scatter) = load_scatter(&a.data)?;
    let part = &pair.partition;
    let start = match &a.init_model {
        Some(path) => {
            let m = ingest::load_model(path)?.model;
            let p = &m.partition;
            if (p.p_x, p.p_y, p.p_z) != (part.p_x, part.p_y, part.p_z) || m.q() != a.q {
                return Err(usage("initial model does not match the data layout or --q"));
            }
            Some(FactorModel::new(part.clone(), m.lambda, m.psi)?)
        }
        None => None,
    };
    let report = em::fit(&scatter, a.q, &a.em.config(g.seed, start))?;
    if !g.quiet() {
        eprintln!(
            "q = {}  iterations = {}  loglik = {:.6}  converged = {}",
            a.q, report.iterations, report.final_loglik, report.converged
        );
    }
    if !report.converged {
        log::warn!("EM stopped at the iteration cap before converging");
    }
    let mut out = sink(g.output.as_deref())?;
    ingest::write_model(&SavedModel::from_report(&report), &mut out)?;
    out.write_all(b"\n")?;
    out.flush()?;
    if let Some(path) = &a.trace {
        write_trace(create(path)?, &report.loglik_trace)?;
    }
    if let Some(path) = &a.yz {
        let names = labels(part);
        write_labeled(create(path)?, &pick(&names, &part.y_idx()), &pick(&names, &part.z_idx()), &report.model.sigma_yz())?;
    }
    Ok(())
}

/// Square covariance table reordered to the pair's column order.
fn reorder(table: &Table, wanted: &[String]) -> Result<DMatrix<f64>> {
    let idx: Vec<usize> = wanted
        .iter()
        .map(|w| table.names.iter().position(|n| n == w).expect("column located"))
        .collect();
    Ok(submatrix(&table.data, &idx, &idx))
}

fn read_square(path: &Path) -> Result<Table> {
    let t = ingest::read_table_file(path).with_context(|| format!("reading {}", path.display()))?;
    if t.data.nrows() != t.data.ncols() {
        return Err(usage(format!(
            "{} is {}×{}, expected a square matrix",
            path.display(),
            t.data.nrows(),
            t.data.ncols()
        )));
    }
    Ok(t)
}

fn read_psi(path: &Path, names: &[String]) -> Result<nalgebra::DVector<f64>> {
    let t = ingest::read_table_file(path).with_context(|| format!("reading {}", path.display()))?;
    if t.data.nrows() != 1 {
        return Err(usage("the uniqueness file must have exactly one data row"));
    }
    let vals = names
        .iter()
        .map(|n| {
            t.names
                .iter()
                .position(|c| c == n)
                .map(|j| t.data[(0, j)])
                .ok_or_else(|| filematch::Error::MissingColumn(n.clone()).into())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(nalgebra::DVector::from_vec(vals))
}

pub fn complete(g: &Global, a: &CompleteArgs) -> Result<()> {
    let (part, yz) = if let Some(path) = &a.model {
        let m = ingest::load_model(path)?.model;
        if a.q.is_some_and(|q| q != m.q()) {
            return Err(usage(format!("--q differs from the model's q = {}", m.q())));
        }
        let yz = match a.mode {
            CompleteMode::Em => m.sigma_yz(),
            CompleteMode::Gram => {
                let gram = PartialCovariance::from_full(&m.implied_full(), &m.partition, false)?.minus_diagonal(&m.psi)?;
                complete_gram(&gram, m.q())?
            }
        };
        (m.partition, yz)
    } else {
        let (pa, pb) = (a.cov_a.as_ref().expect("clap"), a.cov_b.as_ref().expect("clap"));
        let q = a.q.ok_or_else(|| usage("--q is required with covariance input"))?;
        let (ta, tb) = (read_square(pa)?, read_square(pb)?);
        let pair = DatasetPair::from_tables(&ta, &tb, &shared(&a.shared))?;
        let cov_a = reorder(&ta, &pair.columns_a())?;
        let cov_b = reorder(&tb, &pair.columns_b())?;
        let part = pair.partition.clone();
        let yz = match a.mode {
            CompleteMode::Em => {
                let scatter = ObservedScatter::from_covariances(part.clone(), &cov_a, &cov_b, a.na, a.nb)?;
                let report = em::fit(&scatter, q, &a.em.config(g.seed, None))?;
                if !g.quiet() {
                    eprintln!(
                        "iterations = {}  loglik = {:.6}  converged = {}",
                        report.iterations, report.final_loglik, report.converged
                    );
                }
                report.model.sigma_yz()
            }
            CompleteMode::Gram => {
                let mut blocks = PartialCovariance::from_marginals(&part, &cov_a, &cov_b, a.na as f64, a.nb as f64)?;
                if let Some(psi_path) = &a.psi {
                    blocks = blocks.minus_diagonal(&read_psi(psi_path, pair.labels())?)?;
                }
                complete_gram(&blocks, q)?
            }
        };
        (part, yz)
    };
    let names = labels(&part);
    write_labeled(sink(g.output.as_deref())?, &pick(&names, &part.y_idx()), &pick(&names, &part.z_idx()), &yz)
}

pub fn select(g: &Global, a: &SelectArgs) -> Result<()> {
    let (pair, scatter) = load_scatter(&a.data)?;
    let part = &pair.partition;
    let q_max = match a.q_max {
        Some(q) => q,
        None => {
            let q = max_factors(part.p_x, part.p_y, part.p_z, Criterion::Assumption2);
            if q < a.q_min {
                return Err(usage("no q meets the rank-deletion dimension condition; pass --q-max"));
            }
            q
        }
    };
    if a.q_min == 0 || q_max < a.q_min {
        return Err(usage(format!("empty q range {}..={q_max}", a.q_min)));
    }
    let table = select_q(&scatter, a.q_min..=q_max, &a.em.config(g.seed, None))?;
    let mut out = sink(g.output.as_deref())?;
    table.write_csv(&mut out)?;
    out.flush()?;
    match table.selected() {
        Some(q) if !g.quiet() => eprintln!("selected q = {q}"),
        Some(_) => {}
        None => return Err(filematch::Error::NonFinite("every candidate fit failed".into()).into()),
    }
    Ok(())
}

pub fn simulate(g: &Global, a: &SimulateArgs) -> Result<()> {
    let d = &a.design;
    let part = PartitionSpec::new(d.px, d.py, d.pz)?;
    let mut design = SimDesign::new(part.clone(), d.q_true, d.na, d.nb, child_seed(g.seed, 0));
    design.standardize = d.standardize;
    design.validate()?;
    let (model, _) = simulate::sample_model(&design)?;
    let sample = simulate::sample_datasets(&model, d.na, d.nb, child_seed(g.seed, 1))?;
    let dir = g.output.clone().unwrap_or_else(|| ".".into());
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let names = labels(&part);
    let labelled = FactorModel::new(part.clone().with_labels(names.clone())?, model.lambda.clone(), model.psi.clone())?;
    ingest::write_table(create(&dir.join("file_a.csv"))?, &pick(&names, &part.a_idx()), &sample.data_a)?;
    ingest::write_table(create(&dir.join("file_b.csv"))?, &pick(&names, &part.b_idx()), &sample.data_b)?;
    ingest::save_model(&SavedModel { seed: Some(g.seed), ..SavedModel::bare(labelled) }, &dir.join("truth.json"))?;
    if !g.quiet() {
        eprintln!("wrote file_a.csv, file_b.csv and truth.json to {}", dir.display());
    }
    Ok(())
}

pub fn benchmark(g: &Global, a: &BenchmarkArgs) -> Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<filematch::Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(usage("no methods given"));
    }
    let need = |v: Option<usize>, flag: &str| v.ok_or_else(|| usage(format!("--{flag} is required")));
    let (px, py, pz) = (need(a.px, "px")?, need(a.py, "py")?, need(a.pz, "pz")?);
    let data = match &a.data {
        Some(path) => {
            let t = ingest::read_table_file(path).with_context(|| format!("reading {}", path.display()))?;
            if t.data.ncols() != px + py + pz {
                return Err(usage(format!(
                    "{} has {} columns, expected p_X + p_Y + p_Z = {}",
                    path.display(),
                    t.data.ncols(),
                    px + py + pz
                )));
            }
            t.data
        }
        None => {
            let q_true = need(a.q_true, "q-true")?;
            let (na, nb) = (a.na.unwrap_or(1000), a.nb.unwrap_or(1000));
            let mut design = SimDesign::new(PartitionSpec::new(px, py, pz)?, q_true, na, nb, child_seed(g.seed, 0));
            design.standardize = a.standardize;
            design.validate()?;
            let (model, _) = simulate::sample_model(&design)?;
            simulate::sample_complete(&model, na + nb, child_seed(g.seed, 1))?
        }
    };
    let n_a = a.na.unwrap_or(1000);
    if n_a < 2 || n_a + 2 > data.nrows() {
        return Err(usage(format!("--na {n_a} leaves fewer than two rows in one file (n = {})", data.nrows())));
    }
    let mut cfg = BenchmarkConfig::new(px, py, pz, n_a, a.q);
    cfg.methods = methods;
    cfg.n_perms = a.n_perms;
    cfg.seed = g.seed;
    cfg.em = a.em.config(g.seed, None);
    cfg.soft.seed = g.seed;
    let result = simulate::run_permutation_benchmark(&data, &cfg)?;
    let mut out = sink(g.output.as_deref())?;
    result.write_records_csv(&mut out, a.runtime)?;
    out.flush()?;
    if let Some(path) = &a.summary {
        result.write_summary_csv(create(path)?)?;
    }
    if let Some(path) = &a.svg {
        let mut f = create(path)?;
        f.write_all(crate::svg::box_plot(&result).as_bytes())?;
        f.flush()?;
    }
    if !g.quiet() {
        for s in result.summary() {
            eprintln!(
                "{:<11} median {:.3e}  IQR {:.3e}  failed {}/{}",
                s.method.name(),
                s.median,
                s.iqr(),
                s.failed,
                s.failed + s.succeeded
            );
        }
    }
    if result.records.iter().all(|r| r.error.is_some()) {
        return Err(TotalFailure.into());
    }
    Ok(())
}
