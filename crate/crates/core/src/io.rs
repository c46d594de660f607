//! Flat-file formats: per-matrix CSV, dataset and policy JSON, trace CSV.
//!
//! Matrix CSV files start with a `rows,cols` header followed by `rows`
//! comma-separated lines in row-major order. Floats are written with 17
//! significant digits so that a write/read round trip is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::lqt::PolicyEvaluation;
use crate::opt::IterateRecord;
use crate::param::{CovariancePolicy, GainPolicy};
use crate::plant::OfflineDataset;

pub const TRACE_HEADER: &str = "iter,cost,cost_gap,policy_error,grad_norm,rho";

/// File names used for a dataset stored as one CSV per matrix.
pub const DATASET_FILES: [&str; 4] = ["X0.csv", "U0.csv", "X1.csv", "W0.csv"];

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    let field = field.trim();
    let v: f64 = field
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {field:?} as a number")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("line {line}: non-finite value {field:?}")));
    }
    Ok(v)
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {field:?} as a count")))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = format!("{},{}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = data_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let dims: Vec<&str> = header.split(',').collect();
    if dims.len() != 2 {
        return Err(Error::Parse(format!(
            "line {hline}: header must be `rows,cols`, got {header:?}"
        )));
    }
    let rows = parse_usize(dims[0], hline)?;
    let cols = parse_usize(dims[1], hline)?;

    let mut values = Vec::new();
    let mut seen_rows = 0;
    for (lineno, line) in lines {
        seen_rows += 1;
        if seen_rows > rows {
            return Err(Error::Parse(format!(
                "line {lineno}: more than the declared {rows} rows"
            )));
        }
        let before = values.len();
        for field in line.split(',') {
            values.push(parse_f64(field, lineno)?);
        }
        if values.len() - before != cols {
            return Err(Error::Parse(format!(
                "line {lineno}: expected {cols} columns, got {}",
                values.len() - before
            )));
        }
    }
    // Rows of a zero-column matrix are blank lines, which are skipped.
    if cols == 0 && seen_rows == 0 {
        return Ok(DMatrix::zeros(rows, 0));
    }
    if seen_rows != rows {
        return Err(Error::Parse(format!(
            "declared {rows} rows but found {seen_rows}"
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!(
            "{what} must be {nrows}x{ncols}, got {} rows of lengths {:?}",
            rows.len(),
            rows.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

fn vector_of(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::Parse(format!(
            "{what} must have length {len}, got {}",
            v.len()
        )));
    }
    Ok(DVector::from_column_slice(v))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDoc {
    n: usize,
    m: usize,
    #[serde(rename = "T")]
    t_len: usize,
    #[serde(rename = "X0")]
    x0: Vec<Vec<f64>>,
    #[serde(rename = "U0")]
    u0: Vec<Vec<f64>>,
    #[serde(rename = "X1")]
    x1: Vec<Vec<f64>>,
    #[serde(rename = "W0", default, skip_serializing_if = "Option::is_none")]
    w0: Option<Vec<Vec<f64>>>,
}

pub fn dataset_to_json(ds: &OfflineDataset) -> String {
    let doc = DatasetDoc {
        n: ds.n(),
        m: ds.m(),
        t_len: ds.t_len(),
        x0: rows_of(&ds.x0_seq),
        u0: rows_of(&ds.u0_seq),
        x1: rows_of(&ds.x1_seq),
        w0: ds.w0_seq.as_ref().map(rows_of),
    };
    serde_json::to_string_pretty(&doc).expect("dataset serializes")
}

pub fn parse_dataset_json(text: &str) -> Result<OfflineDataset> {
    let doc: DatasetDoc =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("dataset JSON: {e}")))?;
    let (n, m, t) = (doc.n, doc.m, doc.t_len);
    let x0 = from_rows(&doc.x0, n, t, "X0")?;
    let u0 = from_rows(&doc.u0, m, t, "U0")?;
    let x1 = from_rows(&doc.x1, n, t, "X1")?;
    let w0 = doc
        .w0
        .as_deref()
        .map(|w| from_rows(w, n, t, "W0"))
        .transpose()?;
    OfflineDataset::new(x0, u0, x1, w0)
}

pub fn write_dataset_csv(dir: &Path, ds: &OfflineDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blocks = [Some(&ds.x0_seq), Some(&ds.u0_seq), Some(&ds.x1_seq), ds.w0_seq.as_ref()];
    for (name, block) in DATASET_FILES.iter().zip(blocks) {
        if let Some(mat) = block {
            fs::write(dir.join(name), matrix_to_csv(mat))?;
        }
    }
    Ok(())
}

pub fn read_dataset_csv(dir: &Path) -> Result<OfflineDataset> {
    let read = |name: &str| -> Result<DMatrix<f64>> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        parse_matrix_csv(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    };
    let w0 = if dir.join(DATASET_FILES[3]).exists() {
        Some(read(DATASET_FILES[3])?)
    } else {
        None
    };
    OfflineDataset::new(read(DATASET_FILES[0])?, read(DATASET_FILES[1])?, read(DATASET_FILES[2])?, w0)
}

/// Reads a dataset from a `.json` file or from a directory of matrix CSVs.
pub fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    if path.is_dir() {
        read_dataset_csv(path)
    } else {
        parse_dataset_json(&fs::read_to_string(path)?)
    }
}

/// Either policy representation, as read from JSON.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyDoc {
    Gain(GainPolicy),
    Covariance(CovariancePolicy),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    n: usize,
    m: usize,
    #[serde(rename = "K")]
    k: Option<Vec<Vec<f64>>>,
    l: Option<Vec<f64>>,
    #[serde(rename = "V")]
    v: Option<Vec<Vec<f64>>>,
    h: Option<Vec<f64>>,
}

pub fn gain_policy_to_json(p: &GainPolicy) -> String {
    serde_json::to_string_pretty(&json!({
        "n": p.n(),
        "m": p.m(),
        "K": rows_of(&p.k_gain),
        "l": p.l_ff.as_slice(),
    }))
    .expect("policy serializes")
}

pub fn covariance_policy_to_json(p: &CovariancePolicy) -> String {
    serde_json::to_string_pretty(&json!({
        "n": p.n(),
        "m": p.m(),
        "V": rows_of(&p.v_mat),
        "h": p.h_vec.as_slice(),
    }))
    .expect("policy serializes")
}

pub fn parse_policy_json(text: &str) -> Result<PolicyDoc> {
    let raw: RawPolicy =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("policy JSON: {e}")))?;
    let (n, m) = (raw.n, raw.m);
    match (raw.k, raw.l, raw.v, raw.h) {
        (Some(k), Some(l), None, None) => Ok(PolicyDoc::Gain(GainPolicy::new(
            from_rows(&k, m, n, "K")?,
            vector_of(&l, m, "l")?,
        )?)),
        (None, None, Some(v), Some(h)) => {
            let rows = n
                .checked_add(m)
                .ok_or_else(|| Error::Parse("n + m overflows".into()))?;
            Ok(PolicyDoc::Covariance(CovariancePolicy::new(
                from_rows(&v, rows, n, "V")?,
                vector_of(&h, rows, "h")?,
            )?))
        }
        _ => Err(Error::Parse(
            "policy JSON needs exactly one of the pairs {K, l} or {V, h}".into(),
        )),
    }
}

pub fn trace_to_csv(records: &[IterateRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 128 + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.cost),
            fmt_f64(r.cost_gap),
            fmt_f64(r.policy_error),
            fmt_f64(r.grad_norm),
            fmt_f64(r.rho)
        );
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<IterateRecord>> {
    let mut lines = data_lines(text);
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        Some((n, h)) => {
            return Err(Error::Parse(format!(
                "line {n}: expected header {TRACE_HEADER:?}, got {h:?}"
            )))
        }
        None => return Err(Error::Parse("empty trace file".into())),
    }
    lines
        .map(|(lineno, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!(
                    "line {lineno}: expected 6 fields, got {}",
                    f.len()
                )));
            }
            Ok(IterateRecord {
                iter: parse_usize(f[0], lineno)?,
                cost: parse_f64(f[1], lineno)?,
                cost_gap: parse_f64(f[2], lineno)?,
                policy_error: parse_f64(f[3], lineno)?,
                grad_norm: parse_f64(f[4], lineno)?,
                rho: parse_f64(f[5], lineno)?,
            })
        })
        .collect()
}

pub fn evaluation_to_json(eval: &PolicyEvaluation) -> serde_json::Value {
    json!({
        "cost": eval.cost,
        "P_V": rows_of(&eval.p_v),
        "Y_V": rows_of(&eval.y_v),
        "E_V": rows_of(&eval.e_v),
        "g": eval.g_xi.as_slice(),
        "G": eval.g_cap.as_slice(),
        "Sigma_V": rows_of(&eval.sigma_v),
        "x_bar": eval.x_bar.as_slice(),
        "Phi": rows_of(&eval.phi),
        "gradient": rows_of(&eval.gradient()),
    })
}

/// Dense matrix as nested row arrays, for JSON reports.
pub fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    json!(rows_of(m))
}
