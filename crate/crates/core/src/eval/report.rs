//! Report files: AUC summary and per-category F1 CSVs, an AUC bar chart
//! with CI whiskers (SVG), and NDJSON per-example predictions.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use super::suite::{EvalReport, MetricSummary};
use crate::fusion::{Ablation, Task};
use crate::io::{create, write_ndjson, IoError};
use crate::types::Category;

fn fmt(v: f64) -> String {
    if v.is_finite() { format!("{v:.4}") } else { String::new() }
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    create(path)?.write_all(text.as_bytes()).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn ablations(report: &EvalReport) -> Vec<Ablation> {
    Ablation::ALL.into_iter().filter(|a| report.results.iter().any(|r| r.ablation == *a)).collect()
}

fn tasks(report: &EvalReport) -> Vec<Task> {
    Task::ALL.into_iter().filter(|t| report.results.iter().any(|r| r.task == *t)).collect()
}

/// AUC per configuration (rows) and task (column groups).
pub fn auc_summary_csv(report: &EvalReport) -> String {
    let tasks = tasks(report);
    let mut out = String::from("model");
    for t in &tasks {
        let t = t.as_str();
        write!(out, ",{t}_auc_mean,{t}_auc_sd,{t}_auc_ci_lo,{t}_auc_ci_hi").unwrap();
    }
    out.push('\n');
    for a in ablations(report) {
        out.push_str(a.label());
        for &t in &tasks {
            match report.result(t, a) {
                Some(r) => write!(out, ",{},{},{},{}", fmt(r.auc.mean), fmt(r.auc.sd), fmt(r.auc.ci.0), fmt(r.auc.ci.1)).unwrap(),
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

/// T3 per-category F1 (mean and sd across folds) per configuration plus the
/// macro average; `absent` flags categories missing from some test fold.
pub fn category_f1_csv(report: &EvalReport) -> String {
    let abl = ablations(report);
    let mut out = String::from("category");
    for a in &abl {
        write!(out, ",{0} f1_mean,{0} f1_sd", a.label()).unwrap();
    }
    out.push_str(",absent_in_some_fold\n");
    let Some(any) = report.results.iter().find(|r| r.task == Task::T3) else { return out };
    for (c, cat) in Category::ALL.iter().enumerate() {
        out.push_str(cat.as_str());
        for &a in &abl {
            let v: Vec<f64> = report.result(Task::T3, a).map(|r| r.folds.iter().map(|f| f.per_class_f1[c]).collect()).unwrap_or_default();
            let (m, s) = mean_sd(&v);
            write!(out, ",{},{}", fmt(m), fmt(s)).unwrap();
        }
        writeln!(out, ",{}", any.absent_classes.iter().any(|x| x == cat.as_str())).unwrap();
    }
    out.push_str("Macro Average");
    for &a in &abl {
        match report.result(Task::T3, a) {
            Some(r) => write!(out, ",{},{}", fmt(r.macro_f1.mean), fmt(r.macro_f1.sd)).unwrap(),
            None => out.push_str(",,"),
        }
    }
    out.push_str(",\n");
    out
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

/// Grouped bars (macro F1, F1+, AUC per configuration) for each task, with
/// whiskers at the bootstrap CI.
pub fn auc_chart_svg(report: &EvalReport) -> String {
    let tasks = tasks(report);
    let abl = ablations(report);
    let colors = ["#4c72b0", "#dd8452", "#55a868"];
    let (panel_w, h, top, bottom, left) = (300.0, 300.0, 40.0, 60.0, 50.0);
    let width = left + panel_w * tasks.len() as f64 + 20.0;
    let plot_h = h - top - bottom;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        writeln!(s, r#"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="lightgray"/>"#, width - 20.0, y(v), y(v)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 4.0, y(v) + 4.0).unwrap();
    }
    let metrics = ["Macro F1", "F1+", "AUC"];
    for (ti, &task) in tasks.iter().enumerate() {
        let x0 = left + panel_w * ti as f64;
        writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-weight="bold">{}</text>"#, x0 + panel_w / 2.0, task.as_str()).unwrap();
        let group_w = panel_w / metrics.len() as f64;
        let bar_w = (group_w - 20.0) / abl.len() as f64;
        for (mi, name) in metrics.iter().enumerate() {
            let gx = x0 + group_w * mi as f64 + 10.0;
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{name}</text>"#, gx + (group_w - 20.0) / 2.0, h - bottom + 15.0).unwrap();
            for (ai, &a) in abl.iter().enumerate() {
                let Some(r) = report.result(task, a) else { continue };
                let m: &MetricSummary = match mi {
                    0 => &r.macro_f1,
                    1 => &r.f1_positive,
                    _ => &r.auc,
                };
                if !m.mean.is_finite() {
                    continue;
                }
                let bx = gx + bar_w * ai as f64;
                let cx = bx + bar_w / 2.0;
                writeln!(
                    s,
                    r#"<rect x="{bx:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {name}: {:.3} [{:.3}, {:.3}]</title></rect>"#,
                    y(m.mean),
                    bar_w - 2.0,
                    y(0.0) - y(m.mean),
                    colors[ai % colors.len()],
                    a.label(),
                    m.mean,
                    m.ci.0,
                    m.ci.1
                )
                .unwrap();
                writeln!(s, r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#, y(m.ci.0), y(m.ci.1)).unwrap();
                for v in [m.ci.0, m.ci.1] {
                    writeln!(s, r#"<line x1="{:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#, cx - 3.0, cx + 3.0, y(v), y(v)).unwrap();
                }
            }
        }
    }
    for (ai, a) in abl.iter().enumerate() {
        let lx = left + 10.0 + 150.0 * ai as f64;
        writeln!(s, r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, h - 25.0, colors[ai % colors.len()]).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 14.0, h - 16.0, a.label()).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `auc_summary.csv`, `category_f1.csv`, `auc_chart.svg`, `predictions.ndjson` and
/// `report.json` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), IoError> {
    write_text(&dir.join("auc_summary.csv"), &auc_summary_csv(report))?;
    write_text(&dir.join("category_f1.csv"), &category_f1_csv(report))?;
    write_text(&dir.join("auc_chart.svg"), &auc_chart_svg(report))?;
    write_ndjson(&dir.join("predictions.ndjson"), &report.predictions)?;
    let summary = serde_json::json!({ "results": report.results, "fold_plans": report.fold_plans });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| IoError::Parse { path: dir.join("report.json"), line: 0, message: e.to_string() })?;
    write_text(&dir.join("report.json"), &(text + "\n"))
}
