//! `report.json`, `summary.txt` and `accuracy.svg` of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::MetricsReport;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// The runs of one strategy and ablation set, with means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    /// Strategy name, followed by `+ablations` when any are set.
    pub arm: String,
    pub strategy: String,
    pub ablations: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricsReport>,
    /// Per-task average accuracy, averaged over the runs that reached the task.
    pub mean_average_accuracy: Vec<f64>,
    pub mean_final_average_accuracy: f64,
    pub std_final_average_accuracy: f64,
    pub mean_forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub profile: String,
    pub arms: Vec<ArmReport>,
}

pub fn arm_label(strategy: &str, ablations: &str) -> String {
    if ablations.is_empty() {
        strategy.to_string()
    } else {
        format!("{strategy}+{ablations}")
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl ArmReport {
    pub fn new(runs: Vec<MetricsReport>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Contract("an arm needs at least one run".into()))?;
        if runs
            .iter()
            .any(|r| r.strategy != first.strategy || r.ablations != first.ablations)
        {
            return Err(Error::Contract("runs of an arm must share strategy and ablations".into()));
        }
        let tasks = runs.iter().map(|r| r.average_accuracy.len()).max().unwrap_or(0);
        let mean_average_accuracy = (0..tasks)
            .map(|t| {
                let v: Vec<f64> = runs.iter().filter_map(|r| r.average_accuracy.get(t).copied()).collect();
                mean(&v)
            })
            .collect();
        let finals: Vec<f64> = runs.iter().map(|r| r.final_average_accuracy).collect();
        let m = mean(&finals);
        let var = mean(&finals.iter().map(|f| (f - m) * (f - m)).collect::<Vec<_>>());
        let forgetting: Vec<f64> = runs.iter().map(|r| r.forgetting).collect();
        Ok(ArmReport {
            arm: arm_label(&first.strategy, &first.ablations),
            strategy: first.strategy.clone(),
            ablations: first.ablations.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            mean_average_accuracy,
            mean_final_average_accuracy: m,
            std_final_average_accuracy: var.sqrt(),
            mean_forgetting: mean(&forgetting),
            runs,
        })
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// Plain-text tables: per-arm averages, then each run's accuracy matrix.
pub fn summary_text(report: &RunReport) -> String {
    let mut s = String::new();
    let tasks = report
        .arms
        .iter()
        .map(|a| a.mean_average_accuracy.len())
        .max()
        .unwrap_or(0);
    let _ = writeln!(s, "profile {}", report.profile);
    let _ = writeln!(s);
    let _ = write!(s, "{:<32}", "average accuracy (%)");
    for t in 1..=tasks {
        let _ = write!(s, "{:>8}", format!("task {t}"));
    }
    let _ = writeln!(s, "{:>12}{:>12}", "final sd", "forgetting");
    for a in &report.arms {
        let _ = write!(s, "{:<32}", a.arm);
        for t in 0..tasks {
            let _ = write!(s, "{:>8}", pct(a.mean_average_accuracy.get(t).copied()));
        }
        let _ = writeln!(
            s,
            "{:>12}{:>12}",
            format!("{:.1}", 100.0 * a.std_final_average_accuracy),
            format!("{:.1}", 100.0 * a.mean_forgetting)
        );
    }
    for a in &report.arms {
        for r in &a.runs {
            let _ = writeln!(s);
            let _ = writeln!(s, "{} seed {}: accuracy (%) on task columns after each task", a.arm, r.seed);
            for (t, row) in r.accuracy_matrix.iter().enumerate() {
                let _ = write!(s, "  after task {:<3}", t + 1);
                for v in row {
                    let _ = write!(s, "{:>8}", pct(*v));
                }
                let _ = writeln!(s);
            }
        }
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Average accuracy against task index: a thin line per run and a thick
/// line for each arm's mean.
pub fn accuracy_svg(report: &RunReport) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let tasks = report
        .arms
        .iter()
        .map(|a| a.mean_average_accuracy.len())
        .max()
        .unwrap_or(1)
        .max(2);
    let x = |t: usize| left + (w - left - right) * t as f64 / (tasks - 1) as f64;
    let y = |v: f64| top + (h - top - bottom) * (1.0 - v);
    let points = |v: &[f64]| {
        v.iter()
            .enumerate()
            .map(|(t, a)| format!("{:.1},{:.1}", x(t), y(*a)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{x2:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{p}</text>"##,
            yy = y(v),
            x2 = w - right,
            tx = left - 6.0,
            ty = y(v) + 4.0,
            p = (v * 100.0) as u32
        );
    }
    for t in 0..tasks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(t),
            h - bottom + 18.0,
            t + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">task</text>"#,
        (left + w - right) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">average accuracy (%)</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    );
    for (i, a) in report.arms.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for r in &a.runs {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1" stroke-opacity="0.35"/>"#,
                points(&r.average_accuracy)
            );
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2.5"/>"#,
            points(&a.mean_average_accuracy)
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{c}" stroke-width="2.5"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&a.arm)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the three report files into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.json", serde_json::to_string_pretty(report)? + "\n")?;
    write("summary.txt", summary_text(report))?;
    write("accuracy.svg", accuracy_svg(report))
}
