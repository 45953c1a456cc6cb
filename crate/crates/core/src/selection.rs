//! Choosing the number of factors by BIC on the observed-data likelihood.

use std::io::Write;
use std::ops::RangeInclusive;

use rayon::prelude::*;

use crate::em::{self, EmConfig};
use crate::error::{Error, Result};
use crate::identifiability::{assumption1_dims, assumption2_dims, dof_complete, dof_matching};
use crate::rng;
use crate::types::ObservedScatter;

/// `qp + p − q(q−1)/2`.
pub fn free_params(p: usize, q: usize) -> usize {
    q * p + p - q * q.saturating_sub(1) / 2
}

/// `−2ℓ + (qp + p − q(q−1)/2) log n`.
pub fn bic_complete(loglik: f64, p: usize, q: usize, n: usize) -> f64 {
    -2.0 * loglik + free_params(p, q) as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicRow {
    pub q: usize,
    /// `None` when the fit failed.
    pub loglik: Option<f64>,
    pub free_params: usize,
    pub bic: Option<f64>,
    pub feasible_c: bool,
    pub feasible_cm: bool,
    pub feasible_a2: bool,
    pub converged: bool,
    /// Largest one-step drop in the fit's log-likelihood trace.
    pub max_decrease: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicTable {
    pub rows: Vec<BicRow>,
    pub p: usize,
    pub n: usize,
}

impl BicTable {
    /// Smallest BIC among successful rows, earliest row on ties.
    pub fn selected(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for row in &self.rows {
            if let Some(b) = row.bic {
                if best.is_none_or(|(_, cur)| b < cur) {
                    best = Some((row.q, b));
                }
            }
        }
        best.map(|(q, _)| q)
    }

    /// Whether every row's BIC recomputes from its own columns.
    pub fn is_consistent(&self) -> bool {
        self.rows.iter().all(|r| {
            r.free_params == free_params(self.p, r.q)
                && match (r.loglik, r.bic) {
                    (Some(l), Some(b)) => b == bic_complete(l, self.p, r.q, self.n),
                    (None, None) => true,
                    _ => false,
                }
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["q", "loglik", "free_params", "bic", "feasible_C", "feasible_CM", "feasible_A2", "selected"])?;
        let chosen = self.selected();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.q.to_string(),
                opt(r.loglik),
                r.free_params.to_string(),
                opt(r.bic),
                r.feasible_c.to_string(),
                r.feasible_cm.to_string(),
                r.feasible_a2.to_string(),
                (chosen == Some(r.q)).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fit every `q` in the range and tabulate BIC with `n = n_A + n_B`.
///
/// Each row gets its own seed derived from `config.seed` and `q`.
pub fn select_q(scatter: &ObservedScatter, q_range: RangeInclusive<usize>, config: &EmConfig) -> Result<BicTable> {
    config.validate()?;
    let part = &scatter.partition;
    let p = part.p();
    let qs: Vec<usize> = q_range.collect();
    if qs.is_empty() {
        return Err(Error::InvalidArgument("empty q range".into()));
    }
    if let Some(&bad) = qs.iter().find(|&&q| q == 0 || q >= p) {
        return Err(Error::InvalidArgument(format!("q = {bad} outside 1..{p}")));
    }
    let n = scatter.n();
    let rows = qs
        .par_iter()
        .map(|&q| {
            let cfg = EmConfig { seed: rng::child_seed(config.seed, q as u64), ..config.clone() };
            let fit = em::fit(scatter, q, &cfg);
            let (loglik, converged, max_decrease, error) = match fit {
                Ok(rep) => (Some(rep.final_loglik), rep.converged, Some(rep.max_decrease()), None),
                Err(e) => {
                    log::warn!("q = {q}: fit failed: {e}");
                    (None, false, None, Some(e.to_string()))
                }
            };
            BicRow {
                q,
                loglik,
                free_params: free_params(p, q),
                bic: loglik.map(|l| bic_complete(l, p, q, n)),
                feasible_c: dof_complete(p, q).is_ok_and(|c| c >= 0),
                feasible_cm: dof_matching(part.p_x, part.p_y, part.p_z, q).is_ok_and(|c| c >= 0),
                feasible_a2: assumption1_dims(part, q) && assumption2_dims(part, q),
                converged,
                max_decrease,
                error,
            }
        })
        .collect();
    Ok(BicTable { rows, p, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::Init;
    use crate::simulate::{sample_datasets, sample_model, SimDesign};
    use crate::types::PartitionSpec;

    #[test]
    fn free_param_counts() {
        assert_eq!(free_params(8, 1), 16);
        assert_eq!(free_params(1, 0), 1);
        assert_eq!(free_params(10, 3), 30 + 10 - 3);
        for p in 1..20 {
            for q in 0..p {
                let direct = (q * p + p) as i64 - (q as i64 * (q as i64 - 1)) / 2;
                assert_eq!(free_params(p, q) as i64, direct);
            }
        }
    }

    #[test]
    fn bic_arithmetic() {
        assert!((bic_complete(0.0, 1, 0, 50) - 50f64.ln()).abs() < 1e-15);
        let b = bic_complete(-123.5, 9, 2, 400);
        assert!((b - (247.0 + 26.0 * 400f64.ln())).abs() < 1e-12);
        assert!(bic_complete(-10.0, 9, 2, 400) < bic_complete(-11.0, 9, 2, 400));
    }

    #[test]
    fn tie_breaks_to_smaller_q() {
        let row = |q, bic| BicRow {
            q,
            loglik: Some(0.0),
            free_params: 0,
            bic: Some(bic),
            feasible_c: true,
            feasible_cm: true,
            feasible_a2: true,
            converged: true,
            max_decrease: None,
            error: None,
        };
        let t = BicTable { rows: vec![row(1, 5.0), row(2, 3.0), row(3, 3.0)], p: 9, n: 10 };
        assert_eq!(t.selected(), Some(2));
        let mut failed = row(1, 0.0);
        failed.bic = None;
        let t = BicTable { rows: vec![failed, row(2, 4.0)], p: 9, n: 10 };
        assert_eq!(t.selected(), Some(2));
    }

    #[test]
    fn selects_true_q_on_large_sample() {
        let part = PartitionSpec::new(4, 4, 4).unwrap();
        let mut design = SimDesign::new(part, 2, 2000, 2000, 11);
        design.standardize = true;
        let (model, _) = sample_model(&design).unwrap();
        let data = sample_datasets(&model, 2000, 2000, 12).unwrap();
        let cfg = EmConfig { init: Init::Random { restarts: 5, burn_iters: 20 }, max_iter: 500, ..Default::default() };
        let table = select_q(&data.scatter, 1..=3, &cfg).unwrap();
        assert!(table.is_consistent());
        assert_eq!(table.selected(), Some(2));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("q,loglik,free_params,bic,feasible_C,feasible_CM,feasible_A2,selected\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn rejects_bad_ranges() {
        let part = PartitionSpec::new(2, 2, 2).unwrap();
        let sc = ObservedScatter::from_covariances(
            part,
            &nalgebra::DMatrix::identity(4, 4),
            &nalgebra::DMatrix::identity(4, 4),
            10,
            10,
        )
        .unwrap();
        let cfg = EmConfig::default();
        assert!(select_q(&sc, 0..=1, &cfg).is_err());
        assert!(select_q(&sc, 2..=6, &cfg).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 3..=2;
        assert!(select_q(&sc, empty, &cfg).is_err());
    }
}
