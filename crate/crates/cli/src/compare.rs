//! Cell-by-cell comparison of two result tables.

use std::path::Path;

use crate::CliError;

/// Columns that identify a row rather than report a result.
const KEY_COLUMNS: [&str; 4] = ["n", "replications", "iter", "run"];

pub struct Cell {
    pub row: usize,
    pub column: String,
    pub a: f64,
    pub b: f64,
    pub diff: f64,
    /// `diff / √(se_a² + se_b²)` when the table carries a `<column>_se`.
    pub z: Option<f64>,
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn load(path: &Path) -> Result<Csv, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok(Csv { header, rows })
}

fn mismatch(msg: impl Into<String>) -> CliError {
    CliError::ShapeMismatch(msg.into())
}

pub fn compare(a_path: &Path, b_path: &Path) -> Result<Vec<Cell>, CliError> {
    let (a, b) = (load(a_path)?, load(b_path)?);
    if a.header != b.header {
        return Err(mismatch(format!("columns differ: {:?} vs {:?}", a.header, b.header)));
    }
    if a.rows.len() != b.rows.len() {
        return Err(mismatch(format!("{} rows vs {} rows", a.rows.len(), b.rows.len())));
    }
    let se_of = |col: &str| a.header.iter().position(|h| *h == format!("{col}_se"));
    let mut cells = Vec::new();
    for (i, (ra, rb)) in a.rows.iter().zip(&b.rows).enumerate() {
        for (j, col) in a.header.iter().enumerate() {
            let (va, vb) = (ra[j].parse::<f64>(), rb[j].parse::<f64>());
            let key = KEY_COLUMNS.contains(&col.as_str());
            match (va, vb) {
                (Ok(x), Ok(y)) if !key => {
                    let diff = if x == y { 0.0 } else { x - y };
                    let z = se_of(col).and_then(|k| {
                        let (sa, sb) = (ra[k].parse::<f64>().ok()?, rb[k].parse::<f64>().ok()?);
                        let s = sa.hypot(sb);
                        Some(if diff == 0.0 { 0.0 } else { diff / s })
                    });
                    cells.push(Cell { row: i, column: col.clone(), a: x, b: y, diff, z });
                }
                _ if ra[j] != rb[j] => {
                    return Err(mismatch(format!("row {i}, column `{col}`: {} vs {}", ra[j], rb[j])));
                }
                _ => {}
            }
        }
    }
    Ok(cells)
}
