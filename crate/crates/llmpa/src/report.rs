//! Report and trace output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use llmpa_core::episode::SuiteRun;
use llmpa_core::metrics::MetricsReport;
use serde::Serialize;

#[derive(Serialize)]
struct ReportFile<'a> {
    reports: Vec<&'a MetricsReport>,
}

pub fn report_json(runs: &[SuiteRun]) -> String {
    let file = ReportFile { reports: runs.iter().map(|r| &r.report).collect() };
    let mut s = serde_json::to_string_pretty(&file).expect("reports serialize");
    s.push('\n');
    s
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Aligned columns: method, Step SR, Task SR, Ele. Acc, Op. F1 (percent).
pub fn report_table(reports: &[&MetricsReport]) -> String {
    let header = ["Method", "Step SR", "Task SR", "Ele. Acc", "Op. F1"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| [r.config_label.clone(), pct(r.step_sr), pct(r.task_sr), pct(r.element_acc), pct(r.operation_f1)])
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for (cell, w) in cells[1..].iter().zip(&widths[1..]) {
            s.push_str(&format!("  {cell:>w$}"));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
    }
    out
}

pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('-') {
            s.push('-');
        }
    }
    s.trim_matches('-').to_string()
}

/// Writes `report.json`, `report.txt` and `traces/<config>.jsonl`; returns the files written.
pub fn write_outputs(dir: &Path, runs: &[SuiteRun]) -> Result<Vec<PathBuf>> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).with_context(|| format!("creating {}", traces.display()))?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    fs::write(&json, report_json(runs)).with_context(|| format!("writing {}", json.display()))?;
    written.push(json);
    let txt = dir.join("report.txt");
    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.report).collect();
    fs::write(&txt, report_table(&reports)).with_context(|| format!("writing {}", txt.display()))?;
    written.push(txt);
    for run in runs {
        let path = traces.join(format!("{}.jsonl", slug(&run.report.config_label)));
        let mut file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        for record in run.episodes.iter().flat_map(|e| &e.trace) {
            serde_json::to_writer(&mut file, record)?;
            file.write_all(b"\n")?;
        }
        written.push(path);
    }
    Ok(written)
}
