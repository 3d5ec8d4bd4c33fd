//! CSV tables and standalone SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ProbeResult, SimilarityMap, SpectrumReport};
use crate::masking::BevMaskPlan;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn write(path: PathBuf, body: &str, summary: &mut ReportSummary) -> Result<()> {
    std::fs::write(&path, body).map_err(|e| CoreError::io(&path, e))?;
    summary.files.push(path);
    Ok(())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CoreError + '_ {
    move |e| CoreError::Format {
        path: path.display().to_string(),
        offset: e.position().map_or(0, |p| p.byte()),
        detail: e.to_string(),
    }
}

fn spectrum_csv(spectra: &[(String, SpectrumReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CoreError::Format {
        path: "spectrum.csv".into(),
        offset: 0,
        detail: e.to_string(),
    };
    w.write_record(["label", "index", "singular_value", "normalized", "cumulative", "effective_rank"])
        .map_err(err)?;
    for (label, s) in spectra {
        for i in 0..s.dim {
            w.write_record([
                label.clone(),
                (i + 1).to_string(),
                s.singular_values[i].to_string(),
                s.normalized[i].to_string(),
                s.cumulative[i].to_string(),
                s.effective_rank.to_string(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CoreError::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Parses `spectrum.csv` back into `(label, singular values, normalized, cumulative, effective rank)`.
#[allow(clippy::type_complexity)]
pub fn read_spectrum_csv(path: &Path) -> Result<Vec<(String, Vec<f64>, Vec<f64>, Vec<f64>, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out: Vec<(String, Vec<f64>, Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CoreError::Format {
                    path: path.display().to_string(),
                    offset: rec.position().map_or(0, |p| p.byte()),
                    detail: format!("column {i} is not a number"),
                })
        };
        let label = rec.get(0).unwrap_or_default().to_string();
        if out.last().map_or(true, |l| l.0 != label) {
            out.push((label, Vec::new(), Vec::new(), Vec::new(), num(5)?));
        }
        let last = out.last_mut().expect("pushed above");
        last.1.push(num(2)?);
        last.2.push(num(3)?);
        last.3.push(num(4)?);
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot of one series per spectrum with x = rank index, y in [0, 1].
fn line_svg(title: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, ml, mr, mt, mb) = (480.0, 320.0, 56.0, 16.0, 32.0, 44.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| ml + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| mt + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            ml - 4.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="start">1</text>"#, ml, h - mb + 14.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{n}</text>"#, ml + pw, h - mb + 14.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">index</text>"#, ml + pw / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    for (k, (label, vals)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = vals.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = mt + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            ml + pw - 6.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue (−1) to red (+1); unmasked cells white.
fn heatmap_svg(map: &SimilarityMap, plan: &BevMaskPlan, title: &str) -> String {
    let cell = 32.0;
    let (w, h) = (map.w as f64 * cell + 20.0, map.h as f64 * cell + 44.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="10" y="16" font-size="12">{}</text>"#, escape(title));
    for r in 0..map.h {
        for c in 0..map.w {
            let (x, y) = (10.0 + c as f64 * cell, 28.0 + r as f64 * cell);
            let fill = match map.get(r, c) {
                None => "#ffffff".to_string(),
                Some(v) => {
                    let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                    let red = (255.0 * t).round() as u8;
                    let blue = (255.0 * (1.0 - t)).round() as u8;
                    format!("#{red:02x}40{blue:02x}")
                }
            };
            let _ = writeln!(
                s,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{fill}" stroke="#cccccc"/>"##
            );
            if let Some(v) = map.get(r, c) {
                let mark = if plan.occupancy.cells[r * map.w + c] { "o" } else { "" };
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="white">{v:.2}{mark}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 3.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `spectrum.csv`, `spectrum_normalized.svg`, `spectrum_cumulative.svg`,
/// `similarity.csv`, one `similarity_NNN.svg` per map and `probe.json`.
/// Missing inputs skip their files and add a warning.
pub fn emit_report(
    out_dir: &Path,
    maps: &[(SimilarityMap, BevMaskPlan)],
    spectra: &[(String, SpectrumReport)],
    probes: &[(String, ProbeResult)],
) -> Result<ReportSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut summary = ReportSummary::default();
    if spectra.is_empty() {
        summary.warnings.push("no spectra supplied; spectrum files skipped".into());
    } else {
        write(out_dir.join("spectrum.csv"), &spectrum_csv(spectra)?, &mut summary)?;
        let norm: Vec<_> = spectra.iter().map(|(l, s)| (l.clone(), s.normalized.clone())).collect();
        let cum: Vec<_> = spectra.iter().map(|(l, s)| (l.clone(), s.cumulative.clone())).collect();
        write(
            out_dir.join("spectrum_normalized.svg"),
            &line_svg("Sorted normalized singular values", "sigma_i / sigma_1", &norm),
            &mut summary,
        )?;
        write(
            out_dir.join("spectrum_cumulative.svg"),
            &line_svg("Cumulative explained variance", "explained", &cum),
            &mut summary,
        )?;
    }
    if maps.is_empty() {
        summary.warnings.push("no similarity maps supplied; similarity files skipped".into());
    } else {
        let mut csv = String::from("scene,h,w,masked,occupied,similarity\n");
        for (k, (m, p)) in maps.iter().enumerate() {
            for r in 0..m.h {
                for c in 0..m.w {
                    let i = r * m.w + c;
                    let _ = writeln!(
                        csv,
                        "{k},{r},{c},{},{},{}",
                        p.masked[i],
                        p.occupancy.cells[i],
                        m.values[i].map_or_else(String::new, |v| v.to_string())
                    );
                }
            }
            write(
                out_dir.join(format!("similarity_{k:03}.svg")),
                &heatmap_svg(m, p, &format!("scene {k}: similarity to empty token (o = occupied)")),
                &mut summary,
            )?;
        }
        write(out_dir.join("similarity.csv"), &csv, &mut summary)?;
    }
    if !probes.is_empty() {
        let obj: serde_json::Map<String, serde_json::Value> = probes
            .iter()
            .map(|(l, r)| (l.clone(), serde_json::to_value(r).expect("plain struct")))
            .collect();
        let body = serde_json::to_string_pretty(&obj).expect("plain map") + "\n";
        write(out_dir.join("probe.json"), &body, &mut summary)?;
    }
    Ok(summary)
}
