//! CSV input and output. Floats are written with 17 significant digits so
//! every emitted value re-parses to the same bits; files are written to a
//! temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, Trim};

use crate::error::{Error, Result};
use crate::optim::{Trace, TraceRow};
use crate::tasks::grid::{GridRecord, GridResult};
use crate::tasks::synth::{ClassificationData, LatticeDataset};

pub const TRACE_HEADER: &str = "iter,elapsed_sec,objective,grad_inf_norm";
pub const GRID_HEADER: &str = "hp1,hp2,neg_lower_bound,pred_error,iters,wall_sec,failed";
pub const POSTERIOR_HEADER: &str = "index,mean,variance";

/// `{:.16e}`, which round-trips every finite `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::domain(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path, e)
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Records of a CSV text with their 1-based line numbers. With
/// `header = Some(h)`, the first line must equal `h`.
fn records(path: &Path, text: &str, header: Option<&str>) -> Result<Vec<(u64, StringRecord)>> {
    let mut reader = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec));
    }
    if let Some(h) = header {
        let first = out.first().map(|(_, r)| r.iter().collect::<Vec<_>>().join(","));
        if first.as_deref() != Some(h) {
            return Err(parse_err(path, 1, format!("expected header `{h}`")));
        }
        out.remove(0);
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| parse_err(path, line, format!("missing column {}", i + 1)))?;
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse `{raw}` in column {}", i + 1)))
}

fn expect_columns(path: &Path, line: u64, rec: &StringRecord, n: usize) -> Result<()> {
    if rec.len() == n {
        Ok(())
    } else {
        Err(parse_err(path, line, format!("expected {n} columns, found {}", rec.len())))
    }
}

pub fn trace_csv(trace: &Trace) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in &trace.rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.iter,
            fmt_f64(r.elapsed_sec),
            fmt_f64(r.objective),
            fmt_f64(r.grad_inf_norm)
        ));
    }
    s
}

pub fn parse_trace(path: &Path, text: &str) -> Result<Trace> {
    let rows = records(path, text, Some(TRACE_HEADER))?
        .into_iter()
        .map(|(line, r)| {
            expect_columns(path, line, &r, 4)?;
            Ok(TraceRow {
                iter: field(path, line, &r, 0)?,
                elapsed_sec: field(path, line, &r, 1)?,
                objective: field(path, line, &r, 2)?,
                grad_inf_norm: field(path, line, &r, 3)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Trace { rows })
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    atomic_write(path, &trace_csv(trace))
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    parse_trace(path, &read_text(path)?)
}

pub fn grid_csv(grid: &GridResult) -> String {
    let mut s = format!("{GRID_HEADER}\n");
    for r in &grid.records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_f64(r.hp1),
            fmt_f64(r.hp2),
            fmt_f64(r.neg_lower_bound),
            fmt_f64(r.pred_error),
            r.iters,
            fmt_f64(r.wall_sec),
            r.failed
        ));
    }
    s
}

pub fn read_grid(path: &Path) -> Result<Vec<GridRecord>> {
    records(path, &read_text(path)?, Some(GRID_HEADER))?
        .into_iter()
        .map(|(line, r)| {
            expect_columns(path, line, &r, 7)?;
            Ok(GridRecord {
                hp1: field(path, line, &r, 0)?,
                hp2: field(path, line, &r, 1)?,
                neg_lower_bound: field(path, line, &r, 2)?,
                pred_error: field(path, line, &r, 3)?,
                iters: field(path, line, &r, 4)?,
                wall_sec: field(path, line, &r, 5)?,
                failed: field(path, line, &r, 6)?,
            })
        })
        .collect()
}

pub fn posterior_csv(mean: &[f64], variance: &[f64]) -> String {
    let mut s = format!("{POSTERIOR_HEADER}\n");
    for (i, (m, v)) in mean.iter().zip(variance).enumerate() {
        s.push_str(&format!("{i},{},{}\n", fmt_f64(*m), fmt_f64(*v)));
    }
    s
}

/// `(mean, variance)` columns of a posterior file.
pub fn read_posterior(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for (k, (line, r)) in records(path, &read_text(path)?, Some(POSTERIOR_HEADER))?
        .into_iter()
        .enumerate()
    {
        expect_columns(path, line, &r, 3)?;
        if field::<usize>(path, line, &r, 0)? != k {
            return Err(parse_err(path, line, format!("expected index {k}")));
        }
        mean.push(field(path, line, &r, 1)?);
        var.push(field(path, line, &r, 2)?);
    }
    Ok((mean, var))
}

/// Headerless numeric CSV with a constant number of columns.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let rows = records(path, &read_text(path)?, None)?;
    let width = rows.first().map_or(0, |(_, r)| r.len());
    rows.into_iter()
        .map(|(line, r)| {
            expect_columns(path, line, &r, width)?;
            (0..width).map(|i| field(path, line, &r, i)).collect()
        })
        .collect()
}

fn read_column<T: std::str::FromStr>(path: &Path) -> Result<Vec<T>> {
    records(path, &read_text(path)?, None)?
        .into_iter()
        .map(|(line, r)| {
            expect_columns(path, line, &r, 1)?;
            field(path, line, &r, 0)
        })
        .collect()
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    read_column(path)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read_column(path)
}

pub fn read_counts(path: &Path) -> Result<Vec<u64>> {
    read_column(path)
}

/// Two-column edge list of zero-based region indices.
pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    records(path, &read_text(path)?, None)?
        .into_iter()
        .map(|(line, r)| {
            expect_columns(path, line, &r, 2)?;
            Ok((field(path, line, &r, 0)?, field(path, line, &r, 1)?))
        })
        .collect()
}

pub fn edges_csv(edges: &[(usize, usize)]) -> String {
    edges.iter().map(|(a, b)| format!("{a},{b}\n")).collect()
}

pub fn column_csv<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(|v| format!("{v}\n")).collect()
}

/// Writes `edges.csv`, `counts.csv` and `truth.csv` (`region,u,v`).
pub fn write_lattice(dir: &Path, data: &LatticeDataset) -> Result<()> {
    atomic_write(&dir.join("edges.csv"), &edges_csv(&data.edges))?;
    atomic_write(&dir.join("counts.csv"), &column_csv(&data.counts))?;
    let mut truth = String::from("region,u,v\n");
    for (i, (u, v)) in data.u.iter().zip(&data.v).enumerate() {
        truth.push_str(&format!("{i},{},{}\n", fmt_f64(*u), fmt_f64(*v)));
    }
    atomic_write(&dir.join("truth.csv"), &truth)
}

/// UCI glass layout: id, features, class label. Labels are remapped to
/// `0..K` in increasing order of the original codes.
pub fn load_glass(path: &Path) -> Result<ClassificationData> {
    let rows = records(path, &read_text(path)?, None)?;
    let mut features = Vec::with_capacity(rows.len());
    let mut raw = Vec::with_capacity(rows.len());
    let width = rows.first().map_or(0, |(_, r)| r.len());
    if !(width == 10 || width == 11) {
        return Err(parse_err(path, rows.first().map_or(1, |(l, _)| *l), format!(
            "expected 10 or 11 columns (id, features, label), found {width}"
        )));
    }
    for (line, r) in rows {
        expect_columns(path, line, &r, width)?;
        features.push(
            (1..width - 1)
                .map(|i| field(path, line, &r, i))
                .collect::<Result<Vec<f64>>>()?,
        );
        raw.push(field::<i64>(path, line, &r, width - 1)?);
    }
    let mut codes = raw.clone();
    codes.sort_unstable();
    codes.dedup();
    if codes.len() < 2 {
        return Err(parse_err(path, 1, "fewer than two classes present"));
    }
    let labels = raw
        .iter()
        .map(|c| codes.binary_search(c).expect("code collected above"))
        .collect();
    Ok(ClassificationData {
        features,
        labels,
        classes: codes.len(),
    })
}
