//! CSV and SVG report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::flops::FlopsReport;
use super::se::SeRecord;
use super::train::{EvalReport, TrainHistory};
use crate::error::{Error, Result};

/// Eval CSV row: `scenario, gamma, nmse_db, samples`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: String,
    pub gamma: String,
    pub nmse_db: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_nmse_db: Option<f64>,
    pub val_nmse_db: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub layer: String,
    pub part: String,
    pub macs: u64,
    pub flops: u64,
}

pub enum Report<'a> {
    History(&'a TrainHistory),
    Eval(&'a [EvalReport]),
    Flops(&'a FlopsReport),
    SeCurve(&'a [SeRecord]),
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Write the CSV at `path` and, for curves, an SVG plot beside it. Returns
/// every file written.
pub fn emit_report(report: Report<'_>, path: &Path) -> Result<Vec<PathBuf>> {
    let mut written = vec![path.to_path_buf()];
    let svg_path = path.with_extension("svg");
    match report {
        Report::History(h) => {
            write_rows(
                path,
                h.epochs.iter().map(|e| HistoryRow {
                    epoch: e.epoch,
                    step: e.step,
                    train_loss: e.train_loss,
                    train_nmse_db: e.train_nmse_db,
                    val_nmse_db: e.val_nmse_db,
                    wall_time_s: e.wall_time_s,
                }),
            )?;
            let steps: Vec<(f64, f64)> = h
                .step_losses
                .iter()
                .enumerate()
                .filter(|(_, l)| **l > 0.0)
                .map(|(i, l)| ((i + 1) as f64, l.log10()))
                .collect();
            let svg = line_plot("Training loss", "step", "log10 MSE", &[("train", steps)]);
            fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
            written.push(svg_path);
        }
        Report::Eval(rows) => write_rows(
            path,
            rows.iter().map(|r| EvalRow {
                scenario: r.scenario.clone(),
                gamma: r.gamma.clone(),
                nmse_db: r.nmse_db,
                samples: r.samples,
            }),
        )?,
        Report::Flops(f) => write_rows(
            path,
            f.layers.iter().map(|l| FlopsRow {
                layer: l.name.clone(),
                part: format!("{:?}", l.part).to_lowercase(),
                macs: l.macs,
                flops: l.flops,
            }),
        )?,
        Report::SeCurve(rows) => {
            write_rows(path, rows.iter())?;
            let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
            methods.dedup();
            let series: Vec<(&str, Vec<(f64, f64)>)> = methods
                .iter()
                .map(|m| {
                    let pts = rows
                        .iter()
                        .filter(|r| r.method == *m)
                        .map(|r| (r.snr_db, r.se_bits_per_hz))
                        .collect();
                    (*m, pts)
                })
                .collect();
            let svg = line_plot("ZF spectral efficiency", "SNR (dB)", "bits/s/Hz", &series);
            fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
            written.push(svg_path);
        }
    }
    Ok(written)
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Minimal SVG line chart; presentation only.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} L{m} {} L{} {}" stroke="black" fill="none"/>"#,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{ylabel}</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (v, anchor, x, y) in [
        (x0, "start", sx(x0), h - m + 15.0),
        (x1, "end", sx(x1), h - m + 15.0),
        (y0, "end", m - 5.0, sy(y0)),
        (y1, "end", m - 5.0, sy(y1)),
    ] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
    for (k, (label, p)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let d: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#,
            w - m + 5.0,
            m + 15.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let reports = vec![EvalReport {
            scenario: "synthetic".into(),
            gamma: "1/4".into(),
            split: Some("test".into()),
            nmse_linear: 0.012345678901234,
            nmse_db: -19.0856241811,
            samples: 64,
            excluded: 0,
        }];
        emit_report(Report::Eval(&reports), &path).unwrap();
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("scenario,gamma,nmse_db,samples\n"));
        let rows: Vec<EvalRow> = read_rows(&path).unwrap();
        assert_eq!(rows[0].nmse_db, reports[0].nmse_db);
        assert_eq!(rows[0].samples, 64);
    }

    #[test]
    fn se_csv_round_trip_and_plot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("se.csv");
        let rows: Vec<SeRecord> = (0..3)
            .map(|i| SeRecord {
                snr_db: 5.0 * i as f64,
                se_bits_per_hz: 1.0 / 3.0 + i as f64,
                method: "perfect".into(),
                gamma: "1/4".into(),
            })
            .collect();
        let files = emit_report(Report::SeCurve(&rows), &path).unwrap();
        assert_eq!(files.len(), 2);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("snr_db,se_bits_per_hz,method,gamma\n"));
        let back: Vec<SeRecord> = read_rows(&path).unwrap();
        assert_eq!(back, rows);
        assert!(fs::read_to_string(&files[1]).unwrap().contains("<polyline"));
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let rows: Vec<SeRecord> = Vec::new();
        let err = emit_report(Report::SeCurve(&rows), Path::new("/nonexistent-dir/x/se.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
