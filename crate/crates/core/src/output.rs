//! Output emission: round-trip-precision CSV, JSON, and the run manifest
//! that accompanies every artifact.

use crate::error::{Error, Result};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// A plain table: column headers with unit suffixes, f64 cells.
#[derive(Clone, Debug, Serialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: Vec<S>) -> Self {
        Table { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    /// CSV with shortest round-trip float formatting.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.headers.join(","));
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_json_string(&self) -> String {
        let objs: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|row| {
                let map: serde_json::Map<String, serde_json::Value> = self
                    .headers
                    .iter()
                    .zip(row.iter())
                    .map(|(h, v)| (h.clone(), serde_json::json!(v)))
                    .collect();
                serde_json::Value::Object(map)
            })
            .collect();
        serde_json::to_string_pretty(&objs).expect("table serializes") + "\n"
    }

    /// Write as `format` ("csv" or "json"); returns the path written.
    pub fn write(&self, dir: &Path, stem: &str, format: &str) -> Result<PathBuf> {
        let (ext, body) = match format {
            "csv" => ("csv", self.to_csv_string()),
            "json" => ("json", self.to_json_string()),
            other => {
                return Err(Error::Validation(format!("unknown output format '{other}'")))
            }
        };
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, body)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize>(dir: &Path, stem: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.json"));
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(&path, body + "\n")?;
    Ok(path)
}

/// Provenance record emitted next to every command's outputs. Wall time is
/// the only field that varies between identical runs, so determinism checks
/// compare the data files, not the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    /// Named numerical error bounds for the operations performed.
    pub error_bounds: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(config_sha256: String, seed: u64) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            seed,
            wall_time_s: 0.0,
            outputs: Vec::new(),
            error_bounds: Vec::new(),
        }
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }

    pub fn record_bound(&mut self, name: &str, bound: f64) {
        self.error_bounds.push((name.to_string(), bound));
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        write_json(dir, &format!("{stem}_manifest"), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_cells_round_trip_exactly() {
        let mut t = Table::new(vec!["a_m", "b_t"]);
        let vals = [
            (0.1 + 0.2, -51.0e-9),
            (std::f64::consts::PI, 1.0 / 3.0),
            (1e-300, -985e-9),
        ];
        for (a, b) in vals {
            t.push(vec![a, b]);
        }
        let csv = t.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "a_m,b_t");
        for ((a, b), line) in vals.iter().zip(lines) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0].parse::<f64>().unwrap().to_bits(), a.to_bits());
            assert_eq!(cells[1].parse::<f64>().unwrap().to_bits(), b.to_bits());
        }
    }

    #[test]
    fn json_table_has_named_fields() {
        let mut t = Table::new(vec!["x_m"]);
        t.push(vec![2.5]);
        let v: serde_json::Value = serde_json::from_str(&t.to_json_string()).unwrap();
        assert_eq!(v[0]["x_m"], 2.5);
    }

    #[test]
    fn table_write_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(vec!["x_m"]);
        t.push(vec![1.0]);
        let p_csv = t.write(dir.path(), "tbl", "csv").unwrap();
        let p_json = t.write(dir.path(), "tbl", "json").unwrap();
        assert!(p_csv.exists() && p_json.exists());
        assert!(t.write(dir.path(), "tbl", "yaml").is_err());

        let mut m = RunManifest::new("abc".into(), 7);
        m.record_output(&p_csv);
        m.record_bound("field", 1e-12);
        let mp = m.write(dir.path(), "tbl").unwrap();
        let text = fs::read_to_string(mp).unwrap();
        assert!(text.contains("tbl.csv"));
        assert!(text.contains("config_sha256"));
    }
}
