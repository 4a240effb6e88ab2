//! Metrics reports and run comparisons as JSON and aligned text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use vqa_debias_core::evaluator::{Comparison, MetricsReport, ReportRows, Row};

use crate::error::{io_err, Error, Result};
use crate::manifest::write_atomic;

/// `report.json` → `report.txt`.
pub fn text_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("txt")
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

/// Writes the JSON report and its text rendering next to it.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<Vec<PathBuf>> {
    write_atomic(path, &json_bytes(report))?;
    let txt = text_path(path);
    write_atomic(&txt, render_report(report).as_bytes())?;
    Ok(vec![path.to_path_buf(), txt])
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_comparison(cmp: &Comparison, path: &Path) -> Result<Vec<PathBuf>> {
    write_atomic(path, &json_bytes(cmp))?;
    let txt = text_path(path);
    write_atomic(&txt, render_comparison(cmp).as_bytes())?;
    Ok(vec![path.to_path_buf(), txt])
}

fn label(key: &str) -> &str {
    match key {
        "presence" => "Presence",
        "count" => "Count",
        "comparison" => "Comparison",
        "rural_urban" => "Rural/Urban",
        "average" => "Average Accuracy",
        "overall" => "Overall Accuracy",
        other => other,
    }
}

pub fn render_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(s, "dataset     {}", report.dataset_id).unwrap();
    writeln!(s, "checkpoint  {}", report.checkpoint_id).unwrap();
    writeln!(s, "shuffle     {}", report.shuffle_seed).unwrap();
    writeln!(s).unwrap();
    writeln!(
        s,
        "{:<18} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "question type", "n", "F_a", "F_q", "F_a-F_q", "F_m"
    )
    .unwrap();
    for (key, row) in ReportRows::LABELS.iter().zip(report.rows.as_array()) {
        if *key == "average" {
            writeln!(s, "{}", "-".repeat(61)).unwrap();
        }
        writeln!(
            s,
            "{:<18} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}{}",
            label(key),
            row.n,
            row.f_a,
            row.f_q,
            row.drop,
            row.f_m,
            if row.degenerate { "  (degenerate)" } else { "" }
        )
        .unwrap();
    }
    s
}

pub fn render_comparison(cmp: &Comparison) -> String {
    let mut s = String::new();
    writeln!(s, "dataset  {}", cmp.dataset_id).unwrap();
    writeln!(s, "a        {}", cmp.checkpoint_a).unwrap();
    writeln!(s, "b        {}", cmp.checkpoint_b).unwrap();
    writeln!(s).unwrap();
    writeln!(
        s,
        "{:<18} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>8} {:>8} {:>8}",
        "question type", "F_a", "drop", "F_m", "F_a", "drop", "F_m", "dF_a", "ddrop", "dF_m"
    )
    .unwrap();
    for r in &cmp.rows {
        writeln!(
            s,
            "{:<18} | {:>7.4} {:>7.4} {:>7.4} | {:>7.4} {:>7.4} {:>7.4} | {:>+8.4} {:>+8.4} {:>+8.4}",
            label(&r.label),
            r.a.f_a,
            r.a.drop,
            r.a.f_m,
            r.b.f_a,
            r.b.drop,
            r.b.f_m,
            r.delta_f_a,
            r.delta_drop,
            r.delta_f_m
        )
        .unwrap();
    }
    s
}

/// Internal consistency of a report: every row's drop and F_m follow from
/// its own accuracies, F_m agrees with the plain harmonic mean, and the
/// average row is the unweighted mean of the non-empty types.
pub fn check_report(report: &MetricsReport) -> std::result::Result<(), String> {
    let rows = report.rows.as_array();
    for (key, r) in ReportRows::LABELS.iter().zip(rows) {
        if r.n == 0 {
            continue;
        }
        if !(0.0..=1.0).contains(&r.f_a) || !(0.0..=1.0).contains(&r.f_q) {
            return Err(format!("{key}: accuracies outside [0, 1]"));
        }
        if r.drop != r.f_a - r.f_q {
            return Err(format!("{key}: drop {} != F_a - F_q", r.drop));
        }
        let expect = Row::new(r.n, r.f_a, r.f_q);
        if r.f_m != expect.f_m || r.degenerate != expect.degenerate {
            return Err(format!("{key}: F_m {} disagrees with its inputs", r.f_m));
        }
        if !r.degenerate {
            let d = r.f_a - r.f_q;
            let harmonic = 2.0 * r.f_a * d / (r.f_a + d);
            if (harmonic - r.f_m).abs() > 1e-12 {
                return Err(format!("{key}: F_m {} vs harmonic mean {harmonic}", r.f_m));
            }
        }
    }
    let avg = Row::average(&rows[..4]).map_err(|e| e.to_string())?;
    if (avg.f_a - report.rows.average.f_a).abs() > 1e-12 || (avg.f_q - report.rows.average.f_q).abs() > 1e-12 {
        return Err("average row is not the mean of the per-type rows".into());
    }
    let n: usize = rows[..4].iter().map(|r| r.n).sum();
    if report.rows.overall.n != n {
        return Err(format!("overall n {} != {} per-type samples", report.rows.overall.n, n));
    }
    Ok(())
}
