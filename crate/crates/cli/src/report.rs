//! Text and CSV rendering of command results.

use std::fmt::Write as _;
use std::path::Path;

use latticeglm::Error;

/// A titled table of string cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, header: &[&str]) -> Self {
        Table {
            title: title.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut width: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let _ = write!(s, "{c:>w$}");
            }
            s.trim_end().to_string()
        };
        let mut out = format!("== {} ==\n", self.title);
        out.push_str(&line(&self.header));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), Error> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Complete output of one command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub command: String,
    pub resolved_config: String,
    pub notes: Vec<String>,
    pub tables: Vec<Table>,
    /// Long-format rows for `--csv` when they differ from the displayed tables.
    pub machine: Option<Table>,
}

impl Report {
    pub fn new(command: &str, resolved_config: String) -> Self {
        Report {
            command: command.to_string(),
            resolved_config,
            ..Report::default()
        }
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn render(&self) -> String {
        let mut out = format!("# latticeglm {}\n# resolved config\n", self.command);
        for l in self.resolved_config.lines() {
            out.push_str("#   ");
            out.push_str(l);
            out.push('\n');
        }
        for n in &self.notes {
            out.push_str(n);
            out.push('\n');
        }
        for t in &self.tables {
            out.push('\n');
            out.push_str(&t.render());
        }
        out
    }

    /// Writes the machine rows, or else the last displayed table, as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<(), Error> {
        match self.machine.as_ref().or(self.tables.last()) {
            Some(t) => t.write_csv(path),
            None => Err(Error::Config(format!("`{}` produced no table", self.command))),
        }
    }
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn num6(v: f64) -> String {
    format!("{v:.6}")
}
