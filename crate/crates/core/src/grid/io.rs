//! CSV import/export for sampled fields.
//!
//! Plain CSV: a header row `x1,…,xn,u1,…,uN`, then one row per grid point.
//! The headed variant prefixes a single `# {json}` line describing the grid so
//! the lattice does not have to be inferred. Values are written with 17
//! significant digits, which round-trips every `f64` exactly.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::{GridDomain, GridField};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub h: f64,
    pub counts: Vec<usize>,
    pub components: usize,
}

pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn column_names(dim: usize, components: usize) -> Vec<String> {
    (1..=dim)
        .map(|i| format!("x{i}"))
        .chain((1..=components).map(|a| format!("u{a}")))
        .collect()
}

fn write_body(field: &GridField, writer: impl Write) -> Result<()> {
    let domain = field.domain();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(column_names(domain.dim(), field.components()))?;
    for idx in 0..domain.len() {
        let row: Vec<String> = domain
            .point(idx)
            .into_iter()
            .chain(field.values_at(idx).iter().copied())
            .map(fmt17)
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the plain CSV form.
pub fn write_csv(field: &GridField, writer: impl Write) -> Result<()> {
    write_body(field, writer)
}

/// Writes the `# {json}` header line followed by the CSV body.
pub fn write_with_header(field: &GridField, mut writer: impl Write) -> Result<()> {
    let d = field.domain();
    let header = FieldHeader {
        dim: d.dim(),
        lower: d.lower().to_vec(),
        upper: d.upper().to_vec(),
        h: d.h(),
        counts: d.counts().to_vec(),
        components: field.components(),
    };
    writeln!(writer, "# {}", serde_json::to_string(&header)?)?;
    write_body(field, writer)
}

struct Rows {
    dim: usize,
    components: usize,
    rows: Vec<Vec<f64>>,
}

fn read_rows(reader: impl Read) -> Result<Rows> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let headers = r.headers()?.clone();
    let dim = headers.iter().filter(|h| h.starts_with('x')).count();
    let components = headers.iter().filter(|h| h.starts_with('u')).count();
    if dim == 0 || components == 0 || dim + components != headers.len() {
        return Err(Error::InvalidInput(format!(
            "CSV header must be x1..xn,u1..uN, got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidInput(format!("row {}: cannot parse `{s}`: {e}", line + 2))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != dim + components {
            return Err(Error::InvalidInput(format!("row {} has {} columns", line + 2, row.len())));
        }
        rows.push(row);
    }
    Ok(Rows { dim, components, rows })
}

fn assemble(domain: GridDomain, rows: Rows) -> Result<GridField> {
    if rows.rows.len() != domain.len() {
        return Err(Error::InvalidInput(format!(
            "{} rows for a grid of {} points",
            rows.rows.len(),
            domain.len()
        )));
    }
    let n = rows.components;
    let mut values = vec![0.0; domain.len() * n];
    let mut seen = vec![false; domain.len()];
    for row in &rows.rows {
        let idx = domain
            .nearest_index(&row[..rows.dim])
            .ok_or_else(|| Error::InvalidInput(format!("point {:?} outside the grid", &row[..rows.dim])))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::InvalidInput(format!("duplicate grid point {:?}", &row[..rows.dim])));
        }
        values[idx * n..(idx + 1) * n].copy_from_slice(&row[rows.dim..]);
    }
    GridField::from_values(domain, n, values)
}

/// Reads plain CSV, inferring the lattice from the coordinate columns.
pub fn read_csv(reader: impl Read) -> Result<GridField> {
    let rows = read_rows(reader)?;
    let mut lower = Vec::with_capacity(rows.dim);
    let mut upper = Vec::with_capacity(rows.dim);
    let mut spacing = f64::INFINITY;
    for axis in 0..rows.dim {
        let mut coords: Vec<f64> = rows.rows.iter().map(|r| r[axis]).collect();
        coords.sort_by(f64::total_cmp);
        coords.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
        if coords.len() < 3 {
            return Err(Error::InvalidInput(format!("axis {axis} has fewer than 3 distinct coordinates")));
        }
        let step = (coords[coords.len() - 1] - coords[0]) / (coords.len() - 1) as f64;
        spacing = spacing.min(step);
        lower.push(coords[0]);
        upper.push(coords[coords.len() - 1]);
    }
    let domain = GridDomain::new(lower, upper, spacing)?;
    assemble(domain, rows)
}

/// Reads the headed form written by [`write_with_header`].
pub fn read_with_header(reader: impl Read) -> Result<GridField> {
    let mut reader = BufReader::new(reader);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let json = first
        .strip_prefix("# ")
        .ok_or_else(|| Error::InvalidInput("missing `# {json}` header line".into()))?;
    let header: FieldHeader = serde_json::from_str(json.trim())?;
    let domain = GridDomain::new(header.lower.clone(), header.upper.clone(), header.h)?;
    if domain.counts() != header.counts.as_slice() || domain.dim() != header.dim {
        return Err(Error::InvalidInput("header counts disagree with corners and spacing".into()));
    }
    let rows = read_rows(reader)?;
    if rows.components != header.components || rows.dim != header.dim {
        return Err(Error::InvalidInput("header dimensions disagree with CSV columns".into()));
    }
    assemble(domain, rows)
}
