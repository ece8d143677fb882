use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalReport, REPORT_FILE};
use crate::error::{DmsnError, Result};
use crate::trainer::{RunSummary, LOG_FILE, SUMMARY_FILE};

/// Files written by [`write_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub markdown: PathBuf,
    pub runs: Vec<String>,
    pub plots: Vec<PathBuf>,
}

fn plot_err(e: impl std::fmt::Display) -> DmsnError {
    DmsnError::Plot(e.to_string())
}

/// Columns of a step log by header name.
struct Log {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Log {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect());
        }
        Ok(Log { header, rows })
    }

    fn col(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    fn prefixed(&self, prefix: &str) -> Vec<(String, Vec<f64>)> {
        self.header
            .iter()
            .filter(|h| h.starts_with(prefix))
            .map(|h| (h.clone(), self.col(h).expect("header present")))
            .collect()
    }
}

fn line_plot(path: &Path, title: &str, x_desc: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, p)| p).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_desc).draw().map_err(plot_err)?;
    for (i, (name, p)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let clean: Vec<(f64, f64)> = p.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(clean, color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn against_step(steps: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    steps.iter().copied().zip(ys.iter().copied()).collect()
}

/// Loss decomposition and β trajectory plots of one run.
fn training_plots(dir: &Path, log: &Log) -> Result<Vec<PathBuf>> {
    let Some(steps) = log.col("step") else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let mut series = Vec::new();
    for name in ["total", "det", "low", "con_surrogate"] {
        if let Some(c) = log.col(name) {
            series.push((name.to_string(), against_step(&steps, &c)));
        }
    }
    let highs = log.prefixed("high_");
    if !highs.is_empty() {
        let sum: Vec<f64> = (0..steps.len()).map(|r| highs.iter().map(|(_, c)| c[r]).sum()).collect();
        series.push(("high (sum)".to_string(), against_step(&steps, &sum)));
    }
    let p = dir.join("loss.svg");
    line_plot(&p, "loss decomposition", "step", &series)?;
    out.push(p);

    let betas: Vec<_> = log
        .prefixed("beta_")
        .into_iter()
        .map(|(n, c)| (n, against_step(&steps, &c)))
        .collect();
    if !betas.is_empty() {
        let p = dir.join("beta.svg");
        line_plot(&p, "source weights", "step", &betas)?;
        out.push(p);
    }
    if let Some(probe) = log.col("probe_accuracy") {
        let pts: Vec<(f64, f64)> = against_step(&steps, &probe).into_iter().filter(|(_, y)| y.is_finite()).collect();
        if !pts.is_empty() {
            let p = dir.join("probe.svg");
            line_plot(&p, "low-level discriminator probe accuracy", "step", &[("accuracy".into(), pts)])?;
            out.push(p);
        }
    }
    Ok(out)
}

fn pr_plot(dir: &Path, report: &EvalReport) -> Result<PathBuf> {
    let series: Vec<_> = report
        .pr_curves
        .iter()
        .filter(|c| c.num_gt > 0)
        .map(|c| {
            let name = report.class_names.get(c.class_id).cloned().unwrap_or_else(|| c.class_id.to_string());
            let ap = c.ap.unwrap_or(0.0);
            (
                format!("{name} (AP {ap:.3})"),
                c.recall.iter().copied().zip(c.precision.iter().copied()).collect(),
            )
        })
        .collect();
    let p = dir.join("pr.svg");
    line_plot(&p, "precision / recall", "recall", &series)?;
    Ok(p)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Scans every subdirectory of `runs` for a step log, run summary and eval
/// report, writes per-run SVG plots next to them and `runs/report.md`.
pub fn write_report(runs: &Path) -> Result<RunReport> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs)
        .map_err(|e| DmsnError::io(runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter(|p| p.join(LOG_FILE).exists() || p.join(REPORT_FILE).exists())
        .collect();
    dirs.sort();
    if runs.join(LOG_FILE).exists() || runs.join(REPORT_FILE).exists() {
        dirs.insert(0, runs.to_path_buf());
    }
    if dirs.is_empty() {
        return Err(DmsnError::Precondition(format!("no runs found under {}", runs.display())));
    }
    let mut md = String::from("# Runs\n\n| run | status | steps | faulted | final loss | mAP | subnet mAP |\n|---|---|---|---|---|---|---|\n");
    let mut plots = Vec::new();
    let mut names = Vec::new();
    let mut sections = String::new();
    for dir in &dirs {
        let name = dir
            .strip_prefix(runs)
            .ok()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| ".".to_string(), |p| p.display().to_string());
        let summary: Option<RunSummary> = fs::read(dir.join(SUMMARY_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let report = if dir.join(REPORT_FILE).exists() {
            Some(EvalReport::load(&dir.join(REPORT_FILE))?)
        } else {
            None
        };
        let mut run_plots = Vec::new();
        if dir.join(LOG_FILE).exists() {
            run_plots.extend(training_plots(dir, &Log::read(&dir.join(LOG_FILE))?)?);
        }
        if let Some(r) = &report {
            run_plots.push(pr_plot(dir, r)?);
        }
        md.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} | {} |\n",
            summary.as_ref().map_or("-", |s| s.status.as_str()),
            summary.as_ref().map_or("-".into(), |s| s.steps.to_string()),
            summary.as_ref().map_or("-".into(), |s| s.faulted_steps.to_string()),
            fmt(summary.as_ref().map(|s| s.last_total_loss)),
            fmt(report.as_ref().map(|r| r.map)),
            report.as_ref().map_or("-".into(), |r| {
                r.per_subnet_map.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" / ")
            }),
        ));
        if !run_plots.is_empty() {
            sections.push_str(&format!("\n## {name}\n\n"));
            for p in &run_plots {
                let rel = p.strip_prefix(runs).unwrap_or(p);
                sections.push_str(&format!("![{}]({})\n", rel.display(), rel.display()));
            }
        }
        plots.extend(run_plots);
        names.push(name);
    }
    md.push_str(&sections);
    let path = runs.join("report.md");
    fs::write(&path, md).map_err(|e| DmsnError::io(&path, e))?;
    Ok(RunReport {
        markdown: path,
        runs: names,
        plots,
    })
}
