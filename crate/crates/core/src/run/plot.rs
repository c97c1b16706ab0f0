//! SVG rendering of recall curves and loss traces from their CSV files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{read_curve_csv, render_curve};

/// Columns of a loss trace other than `step`.
fn read_trace(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(|s| s.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("step") || header.len() < 2 {
        return Err(Error::Parse("loss trace must start with a step column".into()));
    }
    let mut columns = vec![Vec::new(); header.len()];
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Parse(format!(
                "row {line:?} has {} fields, expected {}",
                fields.len(),
                header.len()
            )));
        }
        for (col, f) in columns.iter_mut().zip(fields) {
            col.push(f.trim().parse().map_err(|_| Error::Parse(format!("bad number {f:?}")))?);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Parse("loss trace has no rows".into()));
    }
    Ok((header, columns))
}

/// Loss curves on a log scale, one polyline per column.
pub fn render_trace_svg(header: &[String], columns: &[Vec<f64>]) -> String {
    const W: f64 = 560.0;
    const H: f64 = 360.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["black", "steelblue", "darkorange", "green", "purple", "brown"];
    let steps = &columns[0];
    let (x0, x1) = (steps[0], *steps.last().expect("rows"));
    let logs: Vec<Vec<f64>> = columns[1..]
        .iter()
        .map(|c| c.iter().map(|v| v.max(1e-12).log10()).collect())
        .collect();
    let lo = logs.iter().flatten().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = logs
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .max(lo + 1.0);
    let px = |s: f64| PAD + if x1 > x0 { (s - x0) / (x1 - x0) } else { 0.0 } * W;
    let py = |l: f64| PAD + (hi - l) / (hi - lo) * H;

    let mut svg = String::new();
    let (tw, th) = (W + 2.0 * PAD + 100.0, H + 2.0 * PAD);
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{tw}" height="{th}" viewBox="0 0 {tw} {th}">"#
    )
    .unwrap();
    writeln!(
        svg,
        r##"  <rect x="{PAD}" y="{PAD}" width="{W}" height="{H}" fill="none" stroke="#bbb"/>"##
    )
    .unwrap();
    let mut e = lo;
    while e <= hi {
        writeln!(
            svg,
            r#"  <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">1e{e}</text>"#,
            PAD - 4.0,
            py(e) + 3.0
        )
        .unwrap();
        e += 1.0;
    }
    writeln!(
        svg,
        r#"  <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{x0}</text>"#,
        px(x0),
        PAD + H + 14.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"  <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{x1}</text>"#,
        px(x1),
        PAD + H + 14.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"  <text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">step</text>"#,
        PAD + W / 2.0,
        th - 8.0
    )
    .unwrap();
    for (i, (name, col)) in header[1..].iter().zip(&logs).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = steps.iter().zip(col).map(|(&s, &l)| format!("{:.2},{:.2}", px(s), py(l))).collect();
        writeln!(
            svg,
            r#"  <polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            svg,
            r#"  <text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{name}</text>"#,
            PAD + W + 10.0,
            PAD + 14.0 * (i + 1) as f64
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders `csv` to `out`: a recall curve when the header is
/// `threshold,recall`, a loss trace when it starts with `step`.
pub fn cmd_plot(csv: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let header = text.lines().next().unwrap_or("").trim();
    if header == "threshold,recall" {
        let curve = read_curve_csv(csv)?;
        let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return render_curve(&curve, &title, out);
    }
    let (names, columns) = read_trace(&text)?;
    std::fs::write(out, render_trace_svg(&names, &columns)).map_err(|e| Error::io(out, e))
}
