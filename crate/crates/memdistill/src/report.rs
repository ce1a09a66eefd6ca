//! CSV, Markdown and JSON emission.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use memdistill_core::continual::ClResult;
use memdistill_core::eval::{AblationRow, EvalResult};
use memdistill_core::Tensor;

use crate::error::{Error, Result};

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Other(format!("{}: {}", path.display(), e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// `iteration,loss,wallclock_s`. Non-finite or missing times are left blank.
pub fn write_loss_trace(path: &Path, losses: &[f64], wallclock: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let t = match wallclock.get(i) {
                Some(t) if t.is_finite() => format!("{:.6}", t),
                _ => String::new(),
            };
            vec![(i + 1).to_string(), format!("{:e}", l), t]
        })
        .collect();
    write_rows(path, &strings(&["iteration", "loss", "wallclock_s"]), &rows)
}

/// One row: the given configuration columns, then `mean,std,n_models`.
pub fn write_eval_csv(path: &Path, config: &[(String, String)], r: &EvalResult) -> Result<()> {
    let mut header: Vec<String> = config.iter().map(|c| c.0.clone()).collect();
    header.extend(strings(&["mean", "std", "n_models"]));
    let mut row: Vec<String> = config.iter().map(|c| c.1.clone()).collect();
    row.extend([format!("{:.6}", r.mean), format!("{:.6}", r.std), r.accuracies.len().to_string()]);
    write_rows(path, &header, &[row])
}

pub fn eval_markdown(config: &[(String, String)], r: &EvalResult) -> String {
    let mut s = String::from("| setting | value |\n|---|---|\n");
    for (k, v) in config {
        s.push_str(&format!("| {} | {} |\n", k, v));
    }
    s.push_str(&format!(
        "| accuracy | {:.2}% ± {:.2} ({} models) |\n",
        100.0 * r.mean,
        100.0 * r.std,
        r.accuracies.len()
    ));
    s
}

const ABLATION_COLS: [&str; 8] = ["momentum", "steps", "downsample", "addressing", "K", "r", "mean", "std"];

fn ablation_cells(r: &AblationRow) -> Vec<String> {
    vec![
        r.cell.mode.as_str().to_string(),
        r.cell.steps.to_string(),
        r.cell.downsample.to_string(),
        match r.cell.parameterization {
            memdistill_core::memory::Parameterization::Addressed => "learned".to_string(),
            memdistill_core::memory::Parameterization::Classical => "classical".to_string(),
        },
        r.num_bases.to_string(),
        r.r.to_string(),
        format!("{:.6}", r.mean),
        format!("{:.6}", r.std),
    ]
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows.iter().map(ablation_cells).collect();
    write_rows(path, &strings(&ABLATION_COLS), &body)
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = format!("| {} |\n|{}\n", ABLATION_COLS.join(" | "), "---|".repeat(ABLATION_COLS.len()));
    for r in rows {
        let mut c = ablation_cells(r);
        c[6] = format!("{:.2}%", 100.0 * r.mean);
        c[7] = format!("{:.2}", 100.0 * r.std);
        s.push_str(&format!("| {} |\n", c.join(" | ")));
    }
    s
}

/// `task,accuracy` with 1-based tasks.
pub fn write_cl_csv(path: &Path, r: &ClResult) -> Result<()> {
    let rows: Vec<Vec<String>> = r
        .accuracies
        .iter()
        .enumerate()
        .map(|(i, a)| vec![(i + 1).to_string(), format!("{:.6}", a)])
        .collect();
    write_rows(path, &strings(&["task", "accuracy"]), &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(Error::io(path))
}

/// A square matrix with `class_i` row and column labels.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let n = m.shape()[0];
    let mut header = vec![String::new()];
    header.extend((0..n).map(|j| format!("class_{}", j)));
    let rows: Vec<Vec<String>> = m
        .rows()
        .enumerate()
        .map(|(i, row)| {
            let mut r = vec![format!("class_{}", i)];
            r.extend(row.iter().map(|v| format!("{}", v)));
            r
        })
        .collect();
    write_rows(path, &header, &rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}
