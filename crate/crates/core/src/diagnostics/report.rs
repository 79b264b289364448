use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{DiagnosticsError, UniformityReport};

pub const CSV_HEADER: [&str; 3] = ["epoch", "metric", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, metric: impl Into<String>, value: f64) -> Self {
        Self {
            epoch,
            metric: metric.into(),
            value,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DiagnosticsError {
    DiagnosticsError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn uniformity_rows(r: &UniformityReport, epoch: usize) -> Vec<MetricRow> {
    let mut rows = vec![
        MetricRow::new(epoch, "density_cv", r.density_cv),
        MetricRow::new(epoch, "gini", r.gini),
        MetricRow::new(epoch, "normalized_entropy", r.normalized_entropy),
        MetricRow::new(epoch, "n_points", r.n_points as f64),
    ];
    if let Some([bx, by]) = r.bandwidth {
        rows.push(MetricRow::new(epoch, "bandwidth_x", bx));
        rows.push(MetricRow::new(epoch, "bandwidth_y", by));
    }
    rows
}

/// Writes `metrics.csv` (`epoch,metric,value`) and `convergence.svg` into
/// `dir`. Uniformity rows carry the last epoch of `losses`.
pub fn emit_report(
    report: Option<&UniformityReport>,
    losses: &[MetricRow],
    dir: &Path,
) -> Result<(PathBuf, PathBuf), DiagnosticsError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut rows = losses.to_vec();
    if let Some(r) = report {
        let last = losses.iter().map(|r| r.epoch).max().unwrap_or(0);
        rows.extend(uniformity_rows(r, last));
    }
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| io_err(&csv_path, e))?;
    for r in &rows {
        w.write_record([r.epoch.to_string(), r.metric.clone(), r.value.to_string()])
            .map_err(|e| io_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;

    let svg_path = dir.join("convergence.svg");
    std::fs::write(&svg_path, render_svg(losses)).map_err(|e| io_err(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>, DiagnosticsError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(io_err(path, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let epoch = rec[0].parse().map_err(|e| io_err(path, e))?;
        let value = rec[2].parse().map_err(|e| io_err(path, e))?;
        rows.push(MetricRow::new(epoch, &rec[1], value));
    }
    Ok(rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One polyline per metric, each rescaled to the plot height.
pub fn render_svg(rows: &[MetricRow]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.metric.as_str()) {
            names.push(&r.metric);
        }
    }
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for (k, name) in names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.metric == *name && r.value.is_finite())
            .map(|r| (r.epoch as f64, r.value))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let coords: Vec<String> = pts
            .iter()
            .map(|(e, v)| {
                let x = pad + e / max_epoch * (w - 2.0 * pad);
                let y = h - pad - (v - lo) / span * (h - 2.0 * pad);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{} [{lo:.4}, {hi:.4}]</text>"#,
            pad + 8.0,
            pad + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#,
        w / 2.0,
        h - 10.0
    );
    s.push_str("</svg>\n");
    s
}
