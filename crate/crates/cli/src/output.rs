//! CSV artifacts. Each file starts with the run's provenance line, then a
//! column header. Floats use the shortest representation that reads back
//! exactly, so identical runs give identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndm_core::tdvp::TrajectoryRecord;

use crate::error::CliError;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const FINAL_CHECKPOINT_FILE: &str = "final_checkpoint.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub struct CsvFile {
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvFile {
    pub fn create(path: &Path, header_line: &str, columns: &[String]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(CliError::io(format!("cannot create {}", path.display())))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "{header_line}").map_err(CliError::io(format!("cannot write {}", path.display())))?;
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(columns)?;
        Ok(CsvFile { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush().map_err(CliError::io("cannot flush CSV output"))?;
        Ok(())
    }
}

/// `t, <obs>_mean, <obs>_stderr, ..., delta_l, delta_l_stderr,
/// acceptance_p, acceptance_q`.
pub fn trajectory_columns(observables: &[String]) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for o in observables {
        cols.push(format!("{o}_mean"));
        cols.push(format!("{o}_stderr"));
    }
    cols.extend(["delta_l", "delta_l_stderr", "acceptance_p", "acceptance_q"].map(String::from));
    cols
}

pub fn trajectory_row(rec: &TrajectoryRecord) -> Vec<String> {
    let mut row = vec![num(rec.t)];
    for e in &rec.observables {
        row.push(num(e.mean));
        row.push(num(e.stderr));
    }
    row.push(num(rec.delta_l.mean));
    row.push(num(rec.delta_l.stderr));
    row.push(opt(rec.acceptance_p));
    row.push(opt(rec.acceptance_q));
    row
}

/// Exact values in the trajectory schema: zero error bars, no acceptance.
pub fn oracle_row(t: f64, observables: &[f64], delta_l: f64) -> Vec<String> {
    let mut row = vec![num(t)];
    for &v in observables {
        row.push(num(v));
        row.push(num(0.0));
    }
    row.push(num(delta_l));
    row.push(num(0.0));
    row.push(String::new());
    row.push(String::new());
    row
}

pub fn comparison_columns(observables: &[String]) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "delta_rho".to_string()];
    for o in observables {
        cols.extend([
            format!("{o}_variational"),
            format!("{o}_stderr"),
            format!("{o}_exact"),
            format!("{o}_diff"),
        ]);
    }
    cols.push("delta_l_variational".into());
    cols.push("delta_l_exact".into());
    cols
}

pub fn comparison_row(rec: &TrajectoryRecord, delta_rho: f64, exact: &[f64], delta_l_exact: f64) -> Vec<String> {
    let mut row = vec![num(rec.t), num(delta_rho)];
    for (e, &x) in rec.observables.iter().zip(exact) {
        row.extend([num(e.mean), num(e.stderr), num(x), num(e.mean - x)]);
    }
    row.push(num(rec.delta_l.mean));
    row.push(num(delta_l_exact));
    row
}

/// Two-column `key,value` file.
pub fn write_summary(path: &Path, header_line: &str, entries: &[(String, String)]) -> Result<(), CliError> {
    let mut f = CsvFile::create(path, header_line, &["key".to_string(), "value".to_string()])?;
    for (k, v) in entries {
        f.row(&[k.clone(), v.clone()])?;
    }
    f.finish()
}

/// Provenance line, column names and rows of a CSV artifact.
pub type Table = (String, Vec<String>, Vec<Vec<String>>);

/// Read a CSV artifact back, skipping the provenance line.
pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(format!("cannot read {}", path.display())))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let columns = reader.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for r in reader.records() {
        rows.push(r?.iter().map(String::from).collect());
    }
    Ok((first.to_string(), columns, rows))
}
