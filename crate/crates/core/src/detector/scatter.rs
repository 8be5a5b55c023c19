use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Result};
use crate::raster::Label;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Self-contained SVG scatter of 2-D points: pristine as circles,
/// generated as crosses, with axes and a legend.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[Label], title: &str) -> String {
    assert_eq!(points.len(), labels.len(), "one label per point");
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if points.is_empty() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b - a > 0.0 { (b - a) * 0.05 } else { 1.0 };
    let (px, py) = (pad(x0, x1), pad(y0, y1));
    let (x0, x1, y0, y1) = (x0 - px, x1 + px, y0 - py, y1 + py);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{bottom}" x2="{left}" y2="{top}"/></g>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">PC1</text><text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">PC2</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (v, x) in [(x0 + px, sx(x0 + px)), (x1 - px, sx(x1 - px))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="10">{v:.3e}</text>"#, bottom + 14.0);
    }
    for (v, y) in [(y0 + py, sy(y0 + py)), (y1 - py, sy(y1 - py))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-size="10">{v:.3e}</text>"#, left - 4.0);
    }
    let _ = writeln!(s, r#"<g class="points">"#);
    for (p, label) in points.iter().zip(labels) {
        let _ = writeln!(s, "{}", marker(*label, sx(p[0]), sy(p[1])));
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="legend" font-size="12">"#);
    for (i, label) in [Label::Pristine, Label::Generated].into_iter().enumerate() {
        let y = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend-entry">{}<text x="{}" y="{}">{label}</text></g>"#,
            marker(label, right - 80.0, y),
            right - 70.0,
            y + 4.0
        );
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

fn marker(label: Label, x: f64, y: f64) -> String {
    match label {
        Label::Pristine => format!(
            r#"<circle class="pristine" cx="{x:.2}" cy="{y:.2}" r="3" fill="none" stroke="steelblue"/>"#
        ),
        Label::Generated => format!(
            r#"<path class="generated" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="firebrick"/>"#,
            x - 3.0,
            y - 3.0,
            x + 3.0,
            y + 3.0,
            x - 3.0,
            y + 3.0,
            x + 3.0,
            y - 3.0
        ),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tab-separated companion table: header then one row per point.
pub fn scatter_table(points: &[[f64; 2]], labels: &[Label]) -> String {
    let mut s = String::from("pc1\tpc2\tlabel\n");
    for (p, l) in points.iter().zip(labels) {
        let _ = writeln!(s, "{:e}\t{:e}\t{l}", p[0], p[1]);
    }
    s
}

/// Writes `path` (SVG) and a `.tsv` table next to it.
pub fn scatter_export(points: &[[f64; 2]], labels: &[Label], title: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scatter_svg(points, labels, title)).map_err(io_err(path))?;
    let table = path.with_extension("tsv");
    fs::write(&table, scatter_table(points, labels)).map_err(io_err(&table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_plot_has_axes() {
        let svg = scatter_svg(&[], &[], "empty");
        assert!(svg.contains(r#"class="axes""#));
        assert_eq!(svg.matches("<circle").count(), 1, "legend marker only");
        assert_eq!(scatter_table(&[], &[]).lines().count(), 1);
    }

    #[test]
    fn two_classes_of_ten() {
        let points: Vec<[f64; 2]> = (0..20).map(|i| [i as f64, (i * i) as f64]).collect();
        let labels: Vec<Label> = (0..20).map(|i| if i < 10 { Label::Pristine } else { Label::Generated }).collect();
        let svg = scatter_svg(&points, &labels, "t");
        let body = &svg[svg.find(r#"class="points""#).unwrap()..svg.find(r#"class="legend""#).unwrap()];
        assert_eq!(body.matches("<circle").count(), 10);
        assert_eq!(body.matches("<path").count(), 10);
        assert_eq!(svg.matches(r#"class="legend-entry""#).count(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.svg");
        scatter_export(&points, &labels, "t", &path).unwrap();
        let table = fs::read_to_string(path.with_extension("tsv")).unwrap();
        assert_eq!(table.lines().count() - 1, 20);
    }
}
