//! Time-series CSV with a versioned comment line and unit-suffixed columns.

use std::fmt::Write as _;

use microgrid_core::engine::TimeSeriesLog;

pub const SCHEMA: &str = "# microgrid-timeseries v1";

/// Nine significant digits in scientific notation.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn columns(n_ibrs: usize, n_lines: usize) -> Vec<String> {
    let mut cols = vec!["time_s".to_string()];
    for i in 1..=n_ibrs {
        for suffix in [
            "ia_A", "ib_A", "ic_A", "vd_V", "vq_V", "id_A", "iq_A", "P_W", "Q_var", "f_Hz", "delta_rad", "switch",
        ] {
            cols.push(format!("ibr{i}_{suffix}"));
        }
    }
    for j in 1..=n_lines {
        cols.push(format!("line{j}_itd_A"));
        cols.push(format!("line{j}_itq_A"));
    }
    cols
}

pub fn write(log: &TimeSeriesLog) -> String {
    let cols = columns(log.n_ibrs(), log.n_lines());
    let mut out = String::with_capacity(64 + log.records.len() * cols.len() * 16);
    out.push_str(SCHEMA);
    out.push('\n');
    out.push_str(&cols.join(","));
    out.push('\n');
    for rec in &log.records {
        out.push_str(&fmt_sig9(rec.time));
        for s in &rec.ibrs {
            for v in [
                s.i_abc.a,
                s.i_abc.b,
                s.i_abc.c,
                s.v_dq.d,
                s.v_dq.q,
                s.i_dq.d,
                s.i_dq.q,
                s.p,
                s.q,
                s.freq_hz,
                s.delta,
            ] {
                out.push(',');
                out.push_str(&fmt_sig9(v));
            }
            let _ = write!(out, ",{}", s.switch);
        }
        for it in &rec.lines {
            out.push(',');
            out.push_str(&fmt_sig9(it.d));
            out.push(',');
            out.push_str(&fmt_sig9(it.q));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CsvError {
    #[error("missing schema line {SCHEMA:?}")]
    Schema,
    #[error("missing header row")]
    Header,
    #[error("row {row} has {got} fields, header has {want}")]
    Arity { row: usize, got: usize, want: usize },
    #[error("row {row}, column {column}: cannot parse {text:?}")]
    Number { row: usize, column: String, text: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

pub fn read(text: &str) -> Result<Table, CsvError> {
    let mut lines = text.lines();
    if lines.next() != Some(SCHEMA) {
        return Err(CsvError::Schema);
    }
    let columns: Vec<String> = lines.next().ok_or(CsvError::Header)?.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (r, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(CsvError::Arity { row: r + 1, got: fields.len(), want: columns.len() });
        }
        let row = fields
            .iter()
            .zip(&columns)
            .map(|(f, c)| {
                f.parse::<f64>().map_err(|_| CsvError::Number { row: r + 1, column: c.clone(), text: f.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

/// Companion gnuplot script for a CSV written by [`write`].
pub fn gnuplot_script(csv_path: &str, n_ibrs: usize) -> String {
    let per_ibr = 12;
    let col = |i: usize, k: usize| 2 + (i - 1) * per_ibr + k;
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set datafile commentschars '#'");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set xlabel 'time (s)'");
    let _ = writeln!(s, "set multiplot layout 2,2");
    let plots = [("phase a current (A)", 0), ("v_d (V)", 3), ("P (W)", 7), ("frequency (Hz)", 9)];
    for (title, k) in plots {
        let _ = writeln!(s, "set title '{title}'");
        let series: Vec<String> = (1..=n_ibrs)
            .map(|i| format!("'{csv_path}' every ::1 using 1:{} with lines", col(i, k)))
            .collect();
        let _ = writeln!(s, "plot {}", series.join(", \\\n     "));
    }
    let _ = writeln!(s, "unset multiplot");
    s
}
