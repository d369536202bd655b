//! CSV ingestion and feature standardization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::Dataset;
use crate::lattice::{LatticeSpec, LatticeValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Response,
    Feature,
    LatticeSource,
    Ignore,
}

/// Column roles. Columns not listed are ignored. Lattice dimensions read the
/// column of the same name, which may be a feature or a lattice source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: BTreeMap<String, ColumnRole>,
    /// Prepend a constant column named `intercept`.
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

impl Schema {
    pub fn response(&self) -> Result<&str> {
        let mut it = self
            .columns
            .iter()
            .filter(|(_, r)| **r == ColumnRole::Response)
            .map(|(n, _)| n.as_str());
        match (it.next(), it.next()) {
            (Some(name), None) => Ok(name),
            (None, _) => Err(Error::Config("schema names no response column".into())),
            _ => Err(Error::Config("schema names more than one response column".into())),
        }
    }

    /// Feature columns in header order.
    fn features<'a>(&self, headers: &'a [String]) -> Vec<&'a str> {
        headers
            .iter()
            .filter(|h| self.columns.get(h.as_str()) == Some(&ColumnRole::Feature))
            .map(String::as_str)
            .collect()
    }
}

/// Raw CSV contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_error)?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(csv_error)?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::IngestError {
                row: i + 1,
                column: String::new(),
                message: e.to_string(),
            })?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if headers.is_empty() || rows.is_empty() {
            return Err(Error::EmptyData);
        }
        Ok(Table { headers, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::IngestError {
                row: 0,
                column: name.to_string(),
                message: "column not found in header".into(),
            })
    }

    /// Parses a numeric column; `row` in errors is 1-based over data rows.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| parse_number(&r[j], i + 1, name))
            .collect()
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::IngestError {
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

fn parse_number(s: &str, row: usize, column: &str) -> Result<f64> {
    let t = s.trim();
    if t.is_empty() {
        return Err(Error::IngestError {
            row,
            column: column.to_string(),
            message: "missing value".into(),
        });
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::IngestError {
            row,
            column: column.to_string(),
            message: format!("cannot parse `{t}` as a finite number"),
        }),
    }
}

/// Result of ingestion.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    /// Source row (1-based) of each kept observation.
    pub source_rows: Vec<usize>,
    /// Rows dropped for a missing lattice value.
    pub dropped_missing: usize,
}

/// Reads `path` and builds a dataset; rows missing a lattice value are dropped
/// and counted.
pub fn ingest_csv(path: &Path, schema: &Schema, lattice: &LatticeSpec) -> Result<Ingested> {
    ingest_table(&Table::read(path)?, schema, lattice, true)
}

/// Builds a dataset from a parsed table. Without `require_response`, the
/// response column may be absent (prediction input).
pub fn ingest_table(
    table: &Table,
    schema: &Schema,
    lattice: &LatticeSpec,
    require_response: bool,
) -> Result<Ingested> {
    let response = schema.response()?;
    let y_col = match table.column_index(response) {
        Ok(j) => Some(j),
        Err(e) if require_response => return Err(e),
        Err(_) => None,
    };
    for (name, role) in &schema.columns {
        if *role == ColumnRole::Feature {
            table.column_index(name)?;
        }
    }
    let features = schema.features(&table.headers);
    let feature_cols = features
        .iter()
        .map(|f| table.column_index(f))
        .collect::<Result<Vec<_>>>()?;
    let dim_cols = lattice
        .dims()
        .iter()
        .map(|d| table.column_index(&d.name))
        .collect::<Result<Vec<_>>>()?;
    let offset = usize::from(schema.intercept);
    let p = features.len() + offset;
    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut cells = Vec::new();
    let mut source_rows = Vec::new();
    let mut dropped = 0;
    for (i, row) in table.rows.iter().enumerate() {
        let row_no = i + 1;
        if row.len() != table.headers.len() {
            return Err(Error::IngestError {
                row: row_no,
                column: String::new(),
                message: format!("expected {} fields, found {}", table.headers.len(), row.len()),
            });
        }
        let lattice_values: Vec<LatticeValue<'_>> = dim_cols
            .iter()
            .map(|&j| {
                let t = row[j].trim();
                if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
                    LatticeValue::Missing
                } else {
                    LatticeValue::Label(t)
                }
            })
            .collect();
        let cell = match lattice.assign_cell(&lattice_values) {
            Ok(c) => c,
            Err(Error::MissingLatticeFeature { .. }) => {
                dropped += 1;
                continue;
            }
            Err(Error::UnknownLevel { dim, label }) => {
                return Err(Error::IngestError {
                    row: row_no,
                    column: dim.clone(),
                    message: format!("unknown level `{label}` for lattice dimension `{dim}`"),
                })
            }
            Err(e) => return Err(e),
        };
        if let Some(j) = y_col {
            y.push(parse_number(&row[j], row_no, response)?);
        } else {
            y.push(0.0);
        }
        if schema.intercept {
            values.push(1.0);
        }
        for (&j, name) in feature_cols.iter().zip(&features) {
            values.push(parse_number(&row[j], row_no, name)?);
        }
        cells.push(cell);
        source_rows.push(row_no);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing lattice values");
    }
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = y.len();
    let x = DMatrix::from_row_slice(n, p, &values);
    let mut names = Vec::with_capacity(p);
    if schema.intercept {
        names.push("intercept".to_string());
    }
    names.extend(features.iter().map(|s| s.to_string()));
    Ok(Ingested {
        dataset: Dataset::new(names, x, y, cells)?,
        source_rows,
        dropped_missing: dropped,
    })
}

/// Per-column z-scoring fit on training data; constant and intercept
/// columns pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let (n, p) = data.x.shape();
        let nf = n.max(1) as f64;
        let mut mean = vec![0.0; p];
        let mut sd = vec![1.0; p];
        for j in 0..p {
            let col = data.x.column(j);
            let m = col.iter().sum::<f64>() / nf;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf;
            if v > 0.0 && data.feature_names[j] != "intercept" {
                mean[j] = m;
                sd[j] = v.sqrt();
            }
        }
        Standardizer {
            names: data.feature_names.clone(),
            mean,
            sd,
        }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.feature_names != self.names {
            return Err(Error::ModelLatticeMismatch(format!(
                "features {:?} do not match the training features {:?}",
                data.feature_names, self.names
            )));
        }
        for j in 0..data.p() {
            let (m, s) = (self.mean[j], self.sd[j]);
            data.x.column_mut(j).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

/// Per-cell row counts, keyed by flat cell index.
pub fn cell_populations(lattice: &LatticeSpec, data: &Dataset) -> Result<HashMap<usize, usize>> {
    let mut out = HashMap::new();
    for c in &data.cells {
        *out.entry(lattice.flat_index(c)?).or_default() += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeDim;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn schema() -> Schema {
        Schema {
            columns: [
                ("y".to_string(), ColumnRole::Response),
                ("x".to_string(), ColumnRole::Feature),
                ("g".to_string(), ColumnRole::LatticeSource),
            ]
            .into_iter()
            .collect(),
            intercept: true,
        }
    }

    fn lattice() -> LatticeSpec {
        LatticeSpec::new(vec![LatticeDim::categorical("g", vec!["a".into(), "b".into()]).unwrap()]).unwrap()
    }

    #[test]
    fn three_rows() {
        let f = write("y,x,g\n1.0,2.0,a\n0.5,-1,b\n2,3e-1,a\n");
        let ing = ingest_csv(f.path(), &schema(), &lattice()).unwrap();
        assert_eq!(ing.dataset.n(), 3);
        assert_eq!(ing.dataset.p(), 2);
        assert_eq!(ing.dataset.x[(2, 1)], 0.3);
        assert_eq!(ing.dataset.cells[1].0, vec![1]);
    }

    #[test]
    fn missing_response_is_an_error() {
        let f = write("y,x,g\n1.0,2.0,a\n,1,b\n");
        match ingest_csv(f.path(), &schema(), &lattice()) {
            Err(Error::IngestError { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_lattice_value_drops_row() {
        let f = write("y,x,g\n1.0,2.0,a\n1,1,\n");
        let ing = ingest_csv(f.path(), &schema(), &lattice()).unwrap();
        assert_eq!(ing.dataset.n(), 1);
        assert_eq!(ing.dropped_missing, 1);
    }

    #[test]
    fn empty_file() {
        let f = write("y,x,g\n");
        assert!(matches!(
            ingest_csv(f.path(), &schema(), &lattice()),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn z_scoring() {
        let f = write("y,x,g\n1,2,a\n1,4,b\n1,9,a\n1,-3,b\n");
        let mut ds = ingest_csv(f.path(), &schema(), &lattice()).unwrap().dataset;
        let st = Standardizer::fit(&ds);
        st.apply(&mut ds).unwrap();
        let col = ds.x.column(1);
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-10);
        assert!((sd - 1.0).abs() < 1e-10);
        assert!(ds.x.column(0).iter().all(|&v| v == 1.0));
    }
}
