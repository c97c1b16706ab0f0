use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::RecallCurve;
use crate::error::{Error, Result};

/// Writes `threshold,recall` with a header and one row per grid point.
/// Values carry 17 significant digits so they read back bitwise.
pub fn write_curve_csv(curve: &RecallCurve, path: &Path) -> Result<()> {
    let mut out = String::from("threshold,recall\n");
    for (t, r) in curve.thresholds.iter().zip(&curve.recall) {
        writeln!(out, "{t:.16e},{r:.16e}").expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<RecallCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("threshold,recall") {
        return Err(Error::Parse(format!("{}: missing threshold,recall header", path.display())));
    }
    let (mut thresholds, mut recall) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("{}: bad row {}: {line}", path.display(), i + 2)))
        };
        let mut fields = line.split(',');
        thresholds.push(parse(fields.next())?);
        recall.push(parse(fields.next())?);
    }
    let mut curve = RecallCurve {
        thresholds,
        recall,
        ar: 0.0,
    };
    curve.ar = curve.step_integral();
    Ok(curve)
}

/// Recall-vs-IoU plot with both axes spanning `[0, 1]`.
pub fn render_curve_svg(curve: &RecallCurve, title: &str) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let px = |t: f64| PAD + t * SIZE;
    let py = |r: f64| PAD + (1.0 - r) * SIZE;
    let points: Vec<String> = curve
        .thresholds
        .iter()
        .zip(&curve.recall)
        .map(|(&t, &r)| format!("{:.3},{:.3}", px(t), py(r)))
        .collect();
    let total = SIZE + 2.0 * PAD;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    )
    .unwrap();
    writeln!(
        svg,
        r##"  <rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#bbb"/>"##
    )
    .unwrap();
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        writeln!(
            svg,
            r#"  <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{v:.1}</text>"#,
            px(v),
            PAD + SIZE + 14.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"  <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.1}</text>"#,
            PAD - 4.0,
            py(v) + 3.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"  <text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">IoU</text>"#,
        PAD + SIZE / 2.0,
        total - 4.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"  <text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{} (AR {:.4})</text>"#,
        PAD + SIZE / 2.0,
        PAD - 12.0,
        xml_escape(title),
        curve.ar
    )
    .unwrap();
    writeln!(
        svg,
        r#"  <polyline fill="none" stroke="green" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

pub fn render_curve(curve: &RecallCurve, title: &str, path: &Path) -> Result<()> {
    fs::write(path, render_curve_svg(curve, title)).map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
