//! Text documents for LCS models.
//!
//! A document is TOML with explicit dimensions, the step size and one
//! row-major block per matrix. `d`, `H` and `c` may be omitted and default to
//! zero; the λ blocks may be omitted when `n_lambda = 0`.
//!
//! ```toml
//! n_x = 1
//! n_u = 1
//! n_lambda = 1
//! dt = 0.1
//! A = [[1.0]]
//! B = [[0.1]]
//! D = [[0.1]]
//! E = [[1.0]]
//! F = [[1.0]]
//! c = [0.0]
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcs::Lcs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LcsDocument {
    n_x: usize,
    n_u: usize,
    n_lambda: usize,
    dt: f64,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    d: Option<Vec<Vec<f64>>>,
    #[serde(rename = "d", default, skip_serializing_if = "Option::is_none")]
    drift: Option<Vec<f64>>,
    #[serde(rename = "E", default, skip_serializing_if = "Option::is_none")]
    e: Option<Vec<Vec<f64>>>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    f: Option<Vec<Vec<f64>>>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    h: Option<Vec<Vec<f64>>>,
    #[serde(rename = "c", default, skip_serializing_if = "Option::is_none")]
    c: Option<Vec<f64>>,
}

/// Upper bound on any declared dimension, to reject absurd documents before
/// allocating.
pub const MAX_DIMENSION: usize = 4096;

fn matrix(name: &str, rows: Option<&Vec<Vec<f64>>>, r: usize, c: usize, required: bool) -> Result<DMatrix<f64>> {
    let Some(rows) = rows else {
        if required && r * c > 0 {
            return Err(Error::Parse(format!("missing matrix `{name}`")));
        }
        return Ok(DMatrix::zeros(r, c));
    };
    if rows.len() != r {
        return Err(Error::Parse(format!("`{name}` has {} rows, expected {r}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(Error::Parse(format!("`{name}` row {i} has {} entries, expected {c}", row.len())));
        }
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(name: &str, v: Option<&Vec<f64>>, n: usize) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(n)),
        Some(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::Parse(format!("`{name}` has {} entries, expected {n}", v.len()))),
    }
}

pub fn parse_lcs_document(text: &str) -> Result<Lcs> {
    let doc: LcsDocument = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let (n_x, n_u, n_l) = (doc.n_x, doc.n_u, doc.n_lambda);
    if n_x == 0 || n_x > MAX_DIMENSION || n_u > MAX_DIMENSION || n_l > MAX_DIMENSION {
        return Err(Error::Parse(format!(
            "dimensions must satisfy 1 ≤ n_x and all ≤ {MAX_DIMENSION}; got n_x = {n_x}, n_u = {n_u}, n_lambda = {n_l}"
        )));
    }
    let lambda_blocks = n_l > 0;
    let lcs = Lcs::new(
        matrix("A", Some(&doc.a), n_x, n_x, true)?,
        matrix("B", Some(&doc.b), n_x, n_u, true)?,
        matrix("D", doc.d.as_ref(), n_x, n_l, lambda_blocks)?,
        vector("d", doc.drift.as_ref(), n_x)?,
        matrix("E", doc.e.as_ref(), n_l, n_x, lambda_blocks)?,
        matrix("F", doc.f.as_ref(), n_l, n_l, lambda_blocks)?,
        matrix("H", doc.h.as_ref(), n_l, n_u, false)?,
        vector("c", doc.c.as_ref(), n_l)?,
        doc.dt,
    )?;
    Ok(lcs)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Writes every block explicitly; the output parses back to an equal LCS.
pub fn write_lcs_document(lcs: &Lcs) -> Result<String> {
    let dims = lcs.dims();
    let doc = LcsDocument {
        n_x: dims.n_x,
        n_u: dims.n_u,
        n_lambda: dims.n_lambda,
        dt: lcs.dt,
        a: rows(&lcs.a),
        b: rows(&lcs.b),
        d: Some(rows(&lcs.d)),
        drift: Some(lcs.drift.iter().copied().collect()),
        e: Some(rows(&lcs.e)),
        f: Some(rows(&lcs.f)),
        h: Some(rows(&lcs.h)),
        c: Some(lcs.c.iter().copied().collect()),
    };
    toml::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))
}
