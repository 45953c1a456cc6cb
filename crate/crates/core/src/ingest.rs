//! Reading the two files, forming scatters, and model persistence.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FactorModel, FitReport, ObservedScatter, PartitionSpec};

/// Version written into saved model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SharedColumns {
    /// Every column name present in both files, in file A's order.
    Auto,
    Named(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    #[default]
    PerDataset,
    /// `X` means from both files stacked; `Y` and `Z` from their own file.
    PooledX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    #[default]
    None,
    UnitVariance,
}

/// A named numeric table read from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub data: DMatrix<f64>,
}

/// Two files with columns in `(X, Y)` and `(X, Z)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    /// Labels are the column names in `(X, Y, Z)` order.
    pub partition: PartitionSpec,
    pub data_a: DMatrix<f64>,
    pub data_b: DMatrix<f64>,
}

impl DatasetPair {
    pub fn shared_columns(&self) -> &[String] {
        &self.labels()[..self.partition.p_x]
    }

    pub fn labels(&self) -> &[String] {
        self.partition.labels.as_deref().expect("pair partitions carry labels")
    }

    pub fn columns_a(&self) -> Vec<String> {
        self.partition.a_idx().into_iter().map(|i| self.labels()[i].clone()).collect()
    }

    pub fn columns_b(&self) -> Vec<String> {
        self.partition.b_idx().into_iter().map(|i| self.labels()[i].clone()).collect()
    }

    /// Align two tables on the shared columns.
    pub fn from_tables(a: &Table, b: &Table, shared: &SharedColumns) -> Result<Self> {
        check_unique(&a.names)?;
        check_unique(&b.names)?;
        let in_b: HashSet<&str> = b.names.iter().map(String::as_str).collect();
        let shared: Vec<String> = match shared {
            SharedColumns::Auto => a.names.iter().filter(|n| in_b.contains(n.as_str())).cloned().collect(),
            SharedColumns::Named(names) => {
                check_unique(names)?;
                for n in names {
                    if !a.names.contains(n) || !in_b.contains(n.as_str()) {
                        return Err(Error::MissingColumn(n.clone()));
                    }
                }
                names.clone()
            }
        };
        if shared.is_empty() {
            return Err(Error::MissingColumn("no column name appears in both files".into()));
        }
        let shared_set: HashSet<&str> = shared.iter().map(String::as_str).collect();
        let only_a: Vec<String> = a.names.iter().filter(|n| !shared_set.contains(n.as_str())).cloned().collect();
        let only_b: Vec<String> = b.names.iter().filter(|n| !shared_set.contains(n.as_str())).cloned().collect();
        let overlap: Vec<&String> = only_a.iter().filter(|n| only_b.contains(n)).collect();
        if let Some(n) = overlap.first() {
            return Err(Error::DuplicateColumn(format!("{n} (in both files but not listed as shared)")));
        }
        let labels: Vec<String> = shared.iter().chain(&only_a).chain(&only_b).cloned().collect();
        let partition = PartitionSpec::new(shared.len(), only_a.len(), only_b.len())?.with_labels(labels)?;
        let order = |names: &[String], wanted: &[&String]| -> Vec<usize> {
            wanted.iter().map(|w| names.iter().position(|n| n == *w).expect("column located")).collect()
        };
        let want_a: Vec<&String> = shared.iter().chain(&only_a).collect();
        let want_b: Vec<&String> = shared.iter().chain(&only_b).collect();
        let data_a = crate::linalg::select_cols(&a.data, &order(&a.names, &want_a));
        let data_b = crate::linalg::select_cols(&b.data, &order(&b.names, &want_b));
        Ok(Self { partition, data_a, data_b })
    }
}

fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::DuplicateColumn(n.clone()));
        }
    }
    Ok(())
}

/// Parse a CSV with one header row and numeric cells.
pub fn read_table<R: Read>(reader: R, file_label: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(Error::EmptyFile(file_label.to_string()));
    }
    check_unique(&names)?;
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::NonNumericCell {
                file: file_label.to_string(),
                row: i + 1,
                column: names[j].clone(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyFile(file_label.to_string()));
    }
    Ok(Table { data: DMatrix::from_row_slice(rows, names.len(), &values), names })
}

pub fn read_table_file(path: &Path) -> Result<Table> {
    read_table(File::open(path)?, &path.display().to_string())
}

/// Read both files and put their columns in `(X, Y)` / `(X, Z)` order.
pub fn load_pair(path_a: &Path, path_b: &Path, shared: &SharedColumns) -> Result<DatasetPair> {
    DatasetPair::from_tables(&read_table_file(path_a)?, &read_table_file(path_b)?, shared)
}

pub fn write_table<W: Write>(out: W, names: &[String], data: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(names)?;
    for i in 0..data.nrows() {
        w.write_record(data.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / m.nrows() as f64)
}

/// Centre (and optionally scale) both files, then form `P` and `T`.
pub fn to_scatter(pair: &DatasetPair, centering: Centering, scaling: Scaling) -> Result<ObservedScatter> {
    let part = &pair.partition;
    let (n_a, n_b) = (pair.data_a.nrows(), pair.data_b.nrows());
    if n_a < 2 || n_b < 2 {
        return Err(Error::InvalidArgument(format!("need at least two rows per file (got {n_a} and {n_b})")));
    }
    let px = part.p_x;
    let mut mean_a = column_means(&pair.data_a);
    let mut mean_b = column_means(&pair.data_b);
    if centering == Centering::PooledX {
        let n = (n_a + n_b) as f64;
        for j in 0..px {
            let pooled = (mean_a[j] * n_a as f64 + mean_b[j] * n_b as f64) / n;
            mean_a[j] = pooled;
            mean_b[j] = pooled;
        }
    }
    let mut a = pair.data_a.clone();
    let mut b = pair.data_b.clone();
    for j in 0..a.ncols() {
        a.column_mut(j).add_scalar_mut(-mean_a[j]);
    }
    for j in 0..b.ncols() {
        b.column_mut(j).add_scalar_mut(-mean_b[j]);
    }
    if scaling == Scaling::UnitVariance {
        let labels = pair.labels();
        let var = |ss: f64, n: usize, name: &str| -> Result<f64> {
            let v = ss / n as f64;
            if v > 0.0 && v.is_finite() {
                Ok(v.sqrt())
            } else {
                Err(Error::ZeroVariance(name.to_string()))
            }
        };
        for j in 0..px {
            let ss = a.column(j).norm_squared() + b.column(j).norm_squared();
            let sd = var(ss, n_a + n_b, &labels[j])?;
            a.column_mut(j).scale_mut(1.0 / sd);
            b.column_mut(j).scale_mut(1.0 / sd);
        }
        for j in px..a.ncols() {
            let sd = var(a.column(j).norm_squared(), n_a, &labels[j])?;
            a.column_mut(j).scale_mut(1.0 / sd);
        }
        for j in px..b.ncols() {
            let sd = var(b.column(j).norm_squared(), n_b, &labels[part.p_a() + j - px])?;
            b.column_mut(j).scale_mut(1.0 / sd);
        }
    }
    let p = crate::linalg::symmetrize(&(a.transpose() * &a));
    let t = crate::linalg::symmetrize(&(b.transpose() * &b));
    ObservedScatter::new(part.clone(), p, t, n_a, n_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    q: usize,
    partition: PartitionSpec,
    /// Row-major `p × q`.
    lambda: Vec<f64>,
    psi: Vec<f64>,
    #[serde(default)]
    loglik: Option<f64>,
    #[serde(default)]
    converged: Option<bool>,
    #[serde(default)]
    seed: Option<u64>,
}

/// A model read back from disk with whatever fit metadata was stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: FactorModel,
    pub loglik: Option<f64>,
    pub converged: Option<bool>,
    pub seed: Option<u64>,
}

impl SavedModel {
    pub fn from_report(report: &FitReport) -> Self {
        Self {
            model: report.model.clone(),
            loglik: Some(report.final_loglik),
            converged: Some(report.converged),
            seed: report.seed,
        }
    }

    pub fn bare(model: FactorModel) -> Self {
        Self { model, loglik: None, converged: None, seed: None }
    }
}

pub fn write_model<W: Write>(saved: &SavedModel, out: W) -> Result<()> {
    let m = &saved.model;
    let (p, q) = (m.p(), m.q());
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        q,
        partition: m.partition.clone(),
        lambda: (0..p).flat_map(|i| (0..q).map(move |k| (i, k))).map(|(i, k)| m.lambda[(i, k)]).collect(),
        psi: m.psi.iter().copied().collect(),
        loglik: saved.loglik,
        converged: saved.converged,
        seed: saved.seed,
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

pub fn read_model<R: Read>(reader: R) -> Result<SavedModel> {
    let value: serde_json::Value = serde_json::from_reader(reader)?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::SchemaMismatch("missing or non-integer version".into()))?;
    if version != MODEL_FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch { found: version.min(u32::MAX as u64) as u32, expected: MODEL_FORMAT_VERSION });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    file.partition.validate().map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    let p = file.partition.p();
    if file.lambda.len() != p * file.q {
        return Err(Error::SchemaMismatch(format!(
            "lambda has {} entries, expected p·q = {}·{}",
            file.lambda.len(),
            p,
            file.q
        )));
    }
    if file.psi.len() != p {
        return Err(Error::SchemaMismatch(format!("psi has {} entries, expected p = {p}", file.psi.len())));
    }
    let lambda = DMatrix::from_row_slice(p, file.q, &file.lambda);
    let model = FactorModel::new(file.partition, lambda, DVector::from_vec(file.psi))
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    Ok(SavedModel { model, loglik: file.loglik, converged: file.converged, seed: file.seed })
}

pub fn save_model(saved: &SavedModel, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    write_model(saved, &mut f)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    read_model(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table(csv: &str) -> Table {
        read_table(csv.as_bytes(), "mem").unwrap()
    }

    #[test]
    fn auto_shared_columns() {
        let a = table("x1,x2,y1\n1,2,3\n4,5,6\n");
        let b = table("z1,x2,x1\n7,8,9\n");
        let pair = DatasetPair::from_tables(&a, &b, &SharedColumns::Auto).unwrap();
        assert_eq!((pair.partition.p_x, pair.partition.p_y, pair.partition.p_z), (2, 1, 1));
        assert_eq!(pair.labels(), ["x1", "x2", "y1", "z1"]);
        assert_eq!(pair.data_b, DMatrix::from_row_slice(1, 3, &[9.0, 8.0, 7.0]));
        assert_eq!(pair.columns_b(), ["x1", "x2", "z1"]);
    }

    #[test]
    fn disjoint_headers() {
        let a = table("a,b\n1,2\n");
        let b = table("c,d\n1,2\n");
        assert!(matches!(DatasetPair::from_tables(&a, &b, &SharedColumns::Auto), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn named_absent_column() {
        let a = table("x1,x2,y1\n1,2,3\n");
        let b = table("x1,x2,z1\n1,2,3\n");
        let named = SharedColumns::Named(vec!["x1".into(), "x9".into()]);
        match DatasetPair::from_tables(&a, &b, &named) {
            Err(Error::MissingColumn(n)) => assert_eq!(n, "x9"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn named_subset_of_common_names_is_rejected() {
        let a = table("x1,x2,y1\n1,2,3\n");
        let b = table("x1,x2,z1\n1,2,3\n");
        let named = SharedColumns::Named(vec!["x1".into()]);
        assert!(matches!(DatasetPair::from_tables(&a, &b, &named), Err(Error::DuplicateColumn(_))));
    }

    #[test]
    fn parse_errors() {
        match read_table("a,b\n1,2\n3,oops\n".as_bytes(), "f.csv") {
            Err(Error::NonNumericCell { row, column, value, .. }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "b", "oops"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_table("a,b\n".as_bytes(), "f"), Err(Error::EmptyFile(_))));
        assert!(matches!(read_table("".as_bytes(), "f"), Err(Error::EmptyFile(_))));
        assert!(matches!(read_table("a,a\n1,2\n".as_bytes(), "f"), Err(Error::DuplicateColumn(_))));
    }

    fn pair(a: &str, b: &str) -> DatasetPair {
        DatasetPair::from_tables(&table(a), &table(b), &SharedColumns::Auto).unwrap()
    }

    #[test]
    fn identical_rows_give_zero_scatter() {
        let pr = pair("x,y\n1,2\n1,2\n", "x,z\n0,1\n2,5\n");
        let sc = to_scatter(&pr, Centering::PerDataset, Scaling::None).unwrap();
        assert_eq!(sc.p, DMatrix::zeros(2, 2));
    }

    #[test]
    fn scatter_over_n_is_sample_covariance() {
        let pr = pair("x,y\n1,2\n3,1\n0,4\n2,2\n", "x,z\n0,1\n2,5\n1,1\n");
        let sc = to_scatter(&pr, Centering::PerDataset, Scaling::None).unwrap();
        let xs = [1.0, 3.0, 0.0, 2.0];
        let ys = [2.0, 1.0, 4.0, 2.0];
        let (mx, my) = (1.5, 2.25);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(sc.p[(0, 1)] / 4.0, cov, epsilon = 1e-14);
        let var_y: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(sc.p[(1, 1)] / 4.0, var_y, epsilon = 1e-14);
    }

    #[test]
    fn pooled_x_centering() {
        let pr = pair("x,y\n1,0\n3,1\n", "x,z\n10,1\n12,2\n14,0\n");
        let sc = to_scatter(&pr, Centering::PooledX, Scaling::None).unwrap();
        let pooled = (1.0 + 3.0 + 10.0 + 12.0 + 14.0) / 5.0;
        let p_xx: f64 = [1.0, 3.0].iter().map(|x| (x - pooled) * (x - pooled)).sum();
        let t_xx: f64 = [10.0, 12.0, 14.0].iter().map(|x| (x - pooled) * (x - pooled)).sum();
        assert_abs_diff_eq!(sc.p[(0, 0)], p_xx, epsilon = 1e-12);
        assert_abs_diff_eq!(sc.t[(0, 0)], t_xx, epsilon = 1e-12);
    }

    #[test]
    fn unit_variance_scaling() {
        let pr = pair("x,y\n1,0\n3,4\n2,1\n", "x,z\n0,1\n2,2\n5,0\n");
        let sc = to_scatter(&pr, Centering::PerDataset, Scaling::UnitVariance).unwrap();
        assert_abs_diff_eq!(sc.p[(1, 1)] / 3.0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sc.t[(1, 1)] / 3.0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!((sc.p[(0, 0)] + sc.t[(0, 0)]) / 6.0, 1.0, epsilon = 1e-12);
        let flat = pair("x,y\n1,7\n3,7\n", "x,z\n0,1\n2,2\n");
        assert!(matches!(to_scatter(&flat, Centering::PerDataset, Scaling::UnitVariance), Err(Error::ZeroVariance(c)) if c == "y"));
        let one = pair("x,y\n1,7\n", "x,z\n0,1\n2,2\n");
        assert!(to_scatter(&one, Centering::PerDataset, Scaling::None).is_err());
    }

    fn sample_model() -> FactorModel {
        let part = PartitionSpec::new(2, 1, 1).unwrap().with_labels(vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();
        let lambda = DMatrix::from_row_slice(4, 2, &[0.1, 1.0 / 3.0, -2.5e-7, 7.0, 1e300, -0.0, 3.14159, 2.0]);
        FactorModel::new(part, lambda, DVector::from_vec(vec![0.3, 1.0 / 7.0, 2.0, 5e-5])).unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let saved = SavedModel { model: sample_model(), loglik: Some(-1234.5678901234567), converged: Some(true), seed: Some(42) };
        let mut buf = Vec::new();
        write_model(&saved, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, saved);
        for (x, y) in back.model.lambda.iter().zip(saved.model.lambda.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&saved, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), saved);
    }

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> Result<SavedModel> {
        let mut buf = Vec::new();
        write_model(&SavedModel::bare(sample_model()), &mut buf).unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        f(&mut v);
        read_model(serde_json::to_vec(&v).unwrap().as_slice())
    }

    #[test]
    fn model_schema_errors() {
        assert!(matches!(edit(|v| { v.as_object_mut().unwrap().remove("psi"); }), Err(Error::SchemaMismatch(_))));
        assert!(matches!(edit(|v| v["partition"]["p_z"] = 2.into()), Err(Error::SchemaMismatch(_))));
        assert!(matches!(edit(|v| v["q"] = 3.into()), Err(Error::SchemaMismatch(_))));
        assert!(matches!(edit(|v| v["version"] = 9.into()), Err(Error::VersionMismatch { found: 9, expected: 1 })));
        assert!(matches!(edit(|v| { v.as_object_mut().unwrap().remove("version"); }), Err(Error::SchemaMismatch(_))));
        assert!(edit(|v| { v.as_object_mut().unwrap().remove("seed"); }).is_ok());
    }

    #[test]
    fn table_round_trip() {
        let names = vec!["u".to_string(), "v".to_string()];
        let data = DMatrix::from_row_slice(2, 2, &[0.1, -1.0 / 3.0, 1e-300, 12345.678]);
        let mut buf = Vec::new();
        write_table(&mut buf, &names, &data).unwrap();
        let back = read_table(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.names, names);
        assert_eq!(back.data, data);
    }
}
