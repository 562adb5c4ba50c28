//! Stage timing tables and mode comparisons.
//!
//! JSON output has sorted keys and every float written with two decimals,
//! so the same run records always give the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use crate::model::{Outcome, Stage};
use crate::orchestrator::PipelineRun;

/// The seven compared metrics, in table order.
pub const METRICS: [&str; 7] = [
    "backend_build_s",
    "frontend_build_s",
    "packaging_s",
    "frontend_deploy_s",
    "backend_deploy_s",
    "controller_cpu_peak_pct",
    "controller_ram_peak_mb",
];

fn metric_label(metric: &str) -> &str {
    match metric {
        "backend_build_s" => "Backend build (s)",
        "frontend_build_s" => "Frontend build (s)",
        "packaging_s" => "Packaging (s)",
        "frontend_deploy_s" => "Frontend deploy (s)",
        "backend_deploy_s" => "Backend deploy (s)",
        "controller_cpu_peak_pct" => "Controller CPU peak (%)",
        "controller_ram_peak_mb" => "Controller RAM peak (MB)",
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub mean_s: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTable {
    pub mode: String,
    pub runs: usize,
    pub stages: Vec<StageRow>,
    pub controller_cpu_time_s: f64,
    pub metrics: BTreeMap<String, f64>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Mean stage durations over `runs` plus controller CPU and memory peaks
/// (averaged over runs). Only stages that actually ran are averaged.
pub fn emit_stage_table(runs: &[PipelineRun], mode_label: &str) -> StageTable {
    let mut per_stage: BTreeMap<Stage, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for r in &run.reports {
            if r.outcome != Outcome::Skipped {
                per_stage.entry(r.stage).or_default().push(r.duration);
            }
        }
    }
    let stages: Vec<StageRow> = per_stage
        .iter()
        .map(|(stage, d)| StageRow {
            stage: *stage,
            mean_s: mean(d),
            runs: d.len(),
        })
        .collect();
    let stage_mean = |s: Stage| per_stage.get(&s).map(|d| mean(d)).unwrap_or(0.0);
    let usage: Vec<_> = runs.iter().filter_map(|r| r.controller).collect();
    let cpu_peak = mean(&usage.iter().map(|u| u.cpu_peak_pct).collect::<Vec<_>>());
    let ram_peak = mean(&usage.iter().map(|u| u.rss_peak_mb).collect::<Vec<_>>());
    let cpu_time = mean(&usage.iter().map(|u| u.cpu_time_s).collect::<Vec<_>>());
    let metrics: BTreeMap<String, f64> = [
        ("backend_build_s", stage_mean(Stage::BuildBackend)),
        ("frontend_build_s", stage_mean(Stage::BuildFrontend)),
        ("packaging_s", stage_mean(Stage::Package)),
        ("frontend_deploy_s", stage_mean(Stage::DeployFrontend)),
        ("backend_deploy_s", stage_mean(Stage::DeployBackend)),
        ("controller_cpu_peak_pct", cpu_peak),
        ("controller_ram_peak_mb", ram_peak),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    StageTable {
        mode: mode_label.to_string(),
        runs: runs.len(),
        stages,
        controller_cpu_time_s: cpu_time,
        metrics,
    }
}

impl StageTable {
    pub fn to_json(&self) -> String {
        to_report_json(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {} ({} runs)", self.mode, self.runs);
        let _ = writeln!(out, "{:<18} {:>10} {:>6}", "stage", "mean (s)", "runs");
        for r in &self.stages {
            let _ = writeln!(out, "{:<18} {:>10.2} {:>6}", r.stage.as_str(), r.mean_s, r.runs);
        }
        let _ = writeln!(out, "{:<18} {:>10.2}", "controller cpu (s)", self.controller_cpu_time_s);
        for m in METRICS {
            let _ = writeln!(
                out,
                "{:<26} {:>10.2}",
                metric_label(m),
                self.metrics.get(m).copied().unwrap_or(0.0)
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub local: f64,
    pub light: f64,
    pub improvement_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub modes: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// `(local - light) / local` as a percentage; 0 when `local` is 0.
pub fn improvement_pct(local: f64, light: f64) -> f64 {
    if local == 0.0 {
        0.0
    } else {
        (local - light) / local * 100.0
    }
}

impl Comparison {
    /// Rows from `(metric, local, light)` triples.
    pub fn from_values<'a>(modes: [&str; 2], values: impl IntoIterator<Item = (&'a str, f64, f64)>) -> Self {
        Comparison {
            modes: modes.iter().map(|m| m.to_string()).collect(),
            rows: values
                .into_iter()
                .map(|(metric, local, light)| ComparisonRow {
                    metric: metric.to_string(),
                    local,
                    light,
                    improvement_pct: improvement_pct(local, light),
                })
                .collect(),
        }
    }

    /// Joins a controller-local table with a controller-light one.
    pub fn join(local: &StageTable, light: &StageTable) -> Self {
        let get = |t: &StageTable, m: &str| t.metrics.get(m).copied().unwrap_or(0.0);
        Comparison::from_values(
            [&local.mode, &light.mode],
            METRICS.iter().map(|m| (*m, get(local, m), get(light, m))),
        )
    }

    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_json(&self) -> String {
        to_report_json(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (a, b) = (
            self.modes.first().map(String::as_str).unwrap_or("local"),
            self.modes.get(1).map(String::as_str).unwrap_or("light"),
        );
        let _ = writeln!(out, "{:<26} {:>10} {:>10} {:>12}", "metric", a, b, "improvement");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<26} {:>10.2} {:>10.2} {:>11.0}%",
                metric_label(&r.metric),
                r.local,
                r.light,
                r.improvement_pct
            );
        }
        out
    }
}

/// Writes floats with exactly two decimals.
struct TwoDecimals;

impl serde_json::ser::Formatter for TwoDecimals {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{:.2}", round2(value))
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

fn to_report_json(value: &impl Serialize) -> String {
    // Going through `Value` sorts object keys.
    let tree = serde_json::to_value(value).expect("report serializes");
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, TwoDecimals);
    tree.serialize(&mut ser).expect("report serializes");
    out.push(b'\n');
    String::from_utf8(out).expect("json is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_is_relative_to_local() {
        assert_eq!(improvement_pct(100.0, 75.0), 25.0);
        assert_eq!(improvement_pct(5.0, 5.0), 0.0);
        assert_eq!(improvement_pct(0.0, 3.0), 0.0);
    }

    #[test]
    fn json_is_sorted_with_two_decimals() {
        let c = Comparison::from_values(["local", "light"], [("backend_build_s", 126.67, 95.0)]);
        let json = c.to_json();
        assert_eq!(
            json,
            "{\"modes\":[\"local\",\"light\"],\"rows\":[{\"improvement_pct\":25.00,\"light\":95.00,\"local\":126.67,\"metric\":\"backend_build_s\"}]}\n"
        );
        let back: Comparison = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows[0].light, 95.0);
    }

    #[test]
    fn empty_table_has_every_metric() {
        let t = emit_stage_table(&[], "light");
        assert_eq!(t.metrics.len(), METRICS.len());
        assert_eq!(t.to_json(), emit_stage_table(&[], "light").to_json());
    }
}
