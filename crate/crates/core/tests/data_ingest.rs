use std::collections::BTreeMap;
use std::io::Write;

use latticeglm::data::{cell_populations, ingest_csv, ColumnRole, Schema, Standardizer};
use latticeglm::lattice::{CellIndex, LatticeDim, LatticeSpec};
use latticeglm::Error;

fn schema() -> Schema {
    let mut columns = BTreeMap::new();
    columns.insert("y".to_string(), ColumnRole::Response);
    columns.insert("x".to_string(), ColumnRole::Feature);
    columns.insert("region".to_string(), ColumnRole::LatticeSource);
    Schema { columns, intercept: true }
}

fn lattice() -> LatticeSpec {
    LatticeSpec::new(vec![LatticeDim::categorical("region", vec!["north".into(), "south".into()]).unwrap()]).unwrap()
}

fn write(contents: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn three_rows() {
    let f = write("y,x,region,note\n1.5,0.2,north,a\n-0.5,1.0,south,b\n2.0,-3.0,north,c\n");
    let ing = ingest_csv(f.path(), &schema(), &lattice()).unwrap();
    let d = &ing.dataset;
    assert_eq!(d.n(), 3);
    assert_eq!(d.feature_names, vec!["intercept", "x"]);
    assert_eq!(d.y, vec![1.5, -0.5, 2.0]);
    assert_eq!(d.x.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0; 3]);
    assert_eq!(d.x[(2, 1)], -3.0);
    assert_eq!(d.cells, vec![CellIndex(vec![0]), CellIndex(vec![1]), CellIndex(vec![0])]);
    let pops = cell_populations(&lattice(), d).unwrap();
    assert_eq!((pops[&0], pops[&1]), (2, 1));
}

#[test]
fn missing_response_reports_row_and_column() {
    let f = write("y,x,region\n1.0,0.1,north\n,0.2,south\n");
    match ingest_csv(f.path(), &schema(), &lattice()) {
        Err(Error::IngestError { row: 2, column, .. }) => assert_eq!(column, "y"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_lattice_value_drops_the_row() {
    let f = write("y,x,region\n1.0,0.1,north\n2.0,0.2,NA\n3.0,0.3,south\n");
    let ing = ingest_csv(f.path(), &schema(), &lattice()).unwrap();
    assert_eq!(ing.dropped_missing, 1);
    assert_eq!(ing.source_rows, vec![1, 3]);
}

#[test]
fn unknown_level_and_bad_numbers_are_errors() {
    let f = write("y,x,region\n1.0,0.1,east\n");
    assert!(matches!(ingest_csv(f.path(), &schema(), &lattice()), Err(Error::IngestError { row: 1, .. })));
    let f = write("y,x,region\n1.0,abc,north\n");
    assert!(matches!(ingest_csv(f.path(), &schema(), &lattice()), Err(Error::IngestError { row: 1, .. })));
    let f = write("y,region\n1.0,north\n");
    assert!(matches!(ingest_csv(f.path(), &schema(), &lattice()), Err(Error::IngestError { .. })));
    let f = write("y,x,region\n");
    assert!(matches!(ingest_csv(f.path(), &schema(), &lattice()), Err(Error::EmptyData)));
}

#[test]
fn standardized_columns_have_zero_mean_unit_sd() {
    let mut body = String::from("y,x,region\n");
    for i in 0..57 {
        body.push_str(&format!("{},{},{}\n", i % 3, (i as f64).powf(1.3) + 10.0, if i % 2 == 0 { "north" } else { "south" }));
    }
    let f = write(&body);
    let mut d = ingest_csv(f.path(), &schema(), &lattice()).unwrap().dataset;
    let st = Standardizer::fit(&d);
    st.apply(&mut d).unwrap();
    let col: Vec<f64> = d.x.column(1).iter().copied().collect();
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-10);
    assert!((sd - 1.0).abs() < 1e-10);
    assert!(d.x.column(0).iter().all(|&v| v == 1.0));
}
