//! Metric reports (JSON and CSV) and optimisation traces (CSV).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sahmr_core::metrics::{FrameMetrics, MetricReport};
use sahmr_core::saopt::TraceRow;

use crate::error::{Error, Result};
use crate::formats::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetricsJson {
    pub frame: usize,
    pub g_mpjpe: f64,
    pub g_mpve: f64,
    pub mpjpe: f64,
    pub mpve: f64,
    pub cerr: f64,
    pub has_contact: bool,
    pub pen_e: f64,
    pub conf_e: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
    pub root_error: f64,
}

impl From<&FrameMetrics> for FrameMetricsJson {
    fn from(m: &FrameMetrics) -> Self {
        FrameMetricsJson {
            frame: m.frame,
            g_mpjpe: m.g_mpjpe,
            g_mpve: m.g_mpve,
            mpjpe: m.mpjpe,
            mpve: m.mpve,
            cerr: m.cerr,
            has_contact: m.has_contact,
            pen_e: m.pen_e,
            conf_e: m.conf_e,
            precision: m.precision,
            recall: m.recall,
            precision_defined: m.precision_defined,
            root_error: m.root_error,
        }
    }
}

impl From<&FrameMetricsJson> for FrameMetrics {
    fn from(m: &FrameMetricsJson) -> Self {
        FrameMetrics {
            frame: m.frame,
            g_mpjpe: m.g_mpjpe,
            g_mpve: m.g_mpve,
            mpjpe: m.mpjpe,
            mpve: m.mpve,
            cerr: m.cerr,
            has_contact: m.has_contact,
            pen_e: m.pen_e,
            conf_e: m.conf_e,
            precision: m.precision,
            recall: m.recall,
            precision_defined: m.precision_defined,
            root_error: m.root_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub method: String,
    pub frames: Vec<FrameMetricsJson>,
    pub aggregate: FrameMetricsJson,
}

impl From<&MetricReport> for ReportJson {
    fn from(r: &MetricReport) -> Self {
        ReportJson {
            method: r.method.clone(),
            frames: r.frames.iter().map(Into::into).collect(),
            aggregate: (&r.aggregate).into(),
        }
    }
}

impl From<&ReportJson> for MetricReport {
    fn from(r: &ReportJson) -> Self {
        MetricReport {
            method: r.method.clone(),
            frames: r.frames.iter().map(Into::into).collect(),
            aggregate: (&r.aggregate).into(),
        }
    }
}

pub fn write_report_json(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, &ReportJson::from(report))
}

pub fn read_report_json(path: &Path) -> Result<MetricReport> {
    Ok((&read_json::<ReportJson>(path)?).into())
}

pub const REPORT_COLUMNS: &str =
    "frame,g_mpjpe,g_mpve,mpjpe,mpve,cerr,has_contact,pen_e,conf_e,precision,recall,precision_defined,root_error";

fn csv_row(out: &mut String, frame: &str, m: &FrameMetrics) {
    let _ = writeln!(
        out,
        "{frame},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.g_mpjpe,
        m.g_mpve,
        m.mpjpe,
        m.mpve,
        m.cerr,
        m.has_contact as u8,
        m.pen_e,
        m.conf_e,
        m.precision,
        m.recall,
        m.precision_defined as u8,
        m.root_error
    );
}

/// One row per frame and a final `mean` row with the aggregate.
pub fn report_csv(report: &MetricReport) -> String {
    let mut s = String::from(REPORT_COLUMNS);
    s.push('\n');
    for m in &report.frames {
        csv_row(&mut s, &m.frame.to_string(), m);
    }
    csv_row(&mut s, "mean", &report.aggregate);
    s
}

pub fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}

/// Both files, named after the method.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_report_json(&dir.join(format!("{}.json", report.method)), report)?;
    write_report_csv(&dir.join(format!("{}.csv", report.method)), report)
}

pub const TRACE_COLUMNS: &str = "iteration,total,reproj,pen,contact,ordinal,step";

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_COLUMNS);
    s.push('\n');
    for r in trace {
        let e = &r.energy;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration, e.total, e.reproj, e.pen, e.contact, e.ordinal, r.step
        );
    }
    s
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sahmr_core::saopt::EnergyBreakdown;

    fn metrics(frame: usize, x: f64) -> FrameMetrics {
        FrameMetrics {
            frame,
            g_mpjpe: x,
            g_mpve: x + 1.0,
            mpjpe: x / 3.0,
            mpve: 0.1 * x,
            cerr: x * 2.0,
            has_contact: frame % 2 == 0,
            pen_e: 1e-5,
            conf_e: 0.2,
            precision: 0.5,
            recall: 0.25,
            precision_defined: true,
            root_error: 12.5,
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = MetricReport::new("sa-hmr", vec![metrics(0, 1.0 / 3.0), metrics(1, 7.25)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_report_json(&p, &r).unwrap();
        assert_eq!(read_report_json(&p).unwrap(), r);
    }

    #[test]
    fn csv_has_one_row_per_frame_and_a_footer() {
        let r = MetricReport::new("x", vec![metrics(0, 1.0), metrics(1, 3.0), metrics(2, 5.0)]).unwrap();
        let csv = report_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], REPORT_COLUMNS);
        assert!(lines[4].starts_with("mean,3,"), "{}", lines[4]);
        let n = REPORT_COLUMNS.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == n));
    }

    #[test]
    fn trace_columns() {
        let row = |i, t| TraceRow {
            iteration: i,
            energy: EnergyBreakdown {
                total: t,
                reproj: t / 2.0,
                pen: 0.0,
                contact: t / 4.0,
                ordinal: 0.0,
            },
            step: 0.5,
        };
        let csv = trace_csv(&[row(0, 4.0), row(1, 2.0)]);
        assert_eq!(csv, format!("{TRACE_COLUMNS}\n0,4,2,0,1,0,0.5\n1,2,1,0,0.5,0,0.5\n"));
    }
}
