//! CSV output for metric logs and ablation tables.

use std::fs;
use std::path::Path;

use crate::adapt::MetricRow;
use crate::benchmark::AblationRow;
use crate::metrics::MetricReport;
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "cycle,source,mpjpe,pa_mpjpe,mpvpe,accel";
pub const ABLATION_HEADER: &str = "suite,variant,seed,mpjpe,pa_mpjpe,mpvpe,accel";

/// `v` rounded to 6 significant digits, printed in its shortest form.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    rounded.to_string()
}

fn report_fields(r: &MetricReport) -> String {
    [r.mpjpe, r.pa_mpjpe, r.mpvpe, r.accel].map(sig6).join(",")
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.cycle, row.source.as_str(), report_fields(&row.report)));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for row in rows {
        out.push_str(&format!("{},{},{},{}\n", row.suite.name(), row.variant, row.seed, report_fields(&row.report)));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}
