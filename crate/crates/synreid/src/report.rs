//! Report bundle: metrics table plus loss and domain-accuracy plots,
//! regenerated from the artifacts a run leaves in its output directory.

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::plot::{render_line_chart, LineSeries};
use crate::train::RunReport;
use std::path::{Path, PathBuf};

#[derive(Debug, Default)]
pub struct ReportBundle {
    pub table_txt: Option<PathBuf>,
    pub table_json: Option<PathBuf>,
    pub loss_plot: Option<PathBuf>,
    pub domain_plot: Option<PathBuf>,
}

fn metrics_table(report: &MetricReport, probe: Option<f64>) -> String {
    let mut header = String::new();
    let mut values = String::new();
    for (k, v) in &report.rank_accuracy {
        header.push_str(&format!("{:>8}", format!("Rank {k}")));
        values.push_str(&format!("{:>8.3}", 100.0 * v));
    }
    header.push_str(&format!("{:>8}", "mAP"));
    values.push_str(&format!("{:>8.3}", 100.0 * report.map));
    let mut out = format!(
        "{header}\n{values}\n\nqueries evaluated: {}\nqueries skipped:   {}\n",
        report.num_queries_evaluated, report.num_queries_skipped
    );
    if let Some(p) = probe {
        out.push_str(&format!("domain probe accuracy: {p:.4}\n"));
    }
    out
}

/// Reads `metrics.json` and `run_report.json` from `run_dir` (each optional)
/// and writes the bundle under `run_dir/report/`. Missing loss curves
/// degrade to a table-only bundle.
pub fn emit_report(run_dir: &Path) -> Result<ReportBundle> {
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    let mut bundle = ReportBundle::default();

    let run_report: Option<RunReport> = {
        let p = run_dir.join("run_report.json");
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::State(format!("{}: {e}", p.display())))?)
        } else {
            None
        }
    };
    let metrics: Option<MetricReport> = {
        let p = run_dir.join("metrics.json");
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::State(format!("{}: {e}", p.display())))?)
        } else {
            None
        }
    };

    if let Some(m) = &metrics {
        let probe = run_report.as_ref().and_then(|r| r.probe_accuracy);
        let txt = report_dir.join("metrics_table.txt");
        std::fs::write(&txt, metrics_table(m, probe)).map_err(|e| Error::io(&txt, e))?;
        bundle.table_txt = Some(txt);
        let json = report_dir.join("metrics_table.json");
        std::fs::write(&json, serde_json::to_string_pretty(m).expect("metrics serialize"))
            .map_err(|e| Error::io(&json, e))?;
        bundle.table_json = Some(json);
    }

    if let Some(r) = &run_report {
        if !r.steps.is_empty() {
            let xy = |f: &dyn Fn(&crate::train::StepRecord) -> f64| -> Vec<(f64, f64)> {
                r.steps.iter().map(|s| (s.step as f64, f(s))).collect()
            };
            let loss_series = vec![
                LineSeries { label: "TOTAL".into(), color: [20, 20, 20], points: xy(&|s| s.total) },
                LineSeries { label: "CSE".into(), color: [214, 69, 65], points: xy(&|s| s.l_cse) },
                LineSeries { label: "TRI".into(), color: [31, 119, 180], points: xy(&|s| s.l_tri) },
                LineSeries {
                    label: "DOM S".into(),
                    color: [44, 160, 44],
                    points: xy(&|s| s.l_s1 + s.l_s2 + s.l_s3),
                },
                LineSeries {
                    label: "CON C".into(),
                    color: [148, 103, 189],
                    points: xy(&|s| s.l_c1_soft + s.l_c2),
                },
            ];
            let loss_path = report_dir.join("loss_curves.png");
            render_line_chart(&loss_path, "LOSS BY STEP", &loss_series)?;
            bundle.loss_plot = Some(loss_path);

            let mut domain_series = vec![LineSeries {
                label: "HEAD ACC".into(),
                color: [31, 119, 180],
                points: r
                    .steps
                    .iter()
                    .filter_map(|s| s.domain_head_acc.map(|a| (s.step as f64, a)))
                    .collect(),
            }];
            let hard: Vec<(f64, f64)> = r
                .steps
                .iter()
                .filter_map(|s| s.l_c1_hard.map(|h| (s.step as f64, h)))
                .collect();
            if !hard.is_empty() {
                domain_series.push(LineSeries { label: "HARD DIS".into(), color: [214, 69, 65], points: hard });
            }
            if let Some(p) = r.probe_accuracy {
                let last = r.steps.last().unwrap().step as f64;
                domain_series.push(LineSeries {
                    label: "PROBE".into(),
                    color: [44, 160, 44],
                    points: vec![(0.0, p), (last, p)],
                });
            }
            let dom_path = report_dir.join("domain_accuracy.png");
            render_line_chart(&dom_path, "DOMAIN DISCRIMINATION", &domain_series)?;
            bundle.domain_plot = Some(dom_path);
        }
    }
    Ok(bundle)
}
