use std::fmt::Write;
use std::path::Path;

use motor_ident::dataset::write_atomic;

use crate::error::CliError;

/// Tab-delimited table with `#` comment lines above a header row.
pub struct Table {
    comments: Vec<String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(config_hash: &str, header: &[&str]) -> Self {
        Self {
            comments: vec![format!("config_hash: {config_hash}")],
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.comments {
            let _ = writeln!(s, "# {c}");
        }
        let _ = writeln!(s, "{}", self.header.join("\t"));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join("\t"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, self.render().as_bytes()).map_err(CliError::from)
    }
}

pub fn num(v: f64) -> String {
    format!("{v:.12e}")
}
