//! Precision-recall curve rendering to SVG.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

fn x_of(recall: f64) -> f64 {
    MARGIN + recall * (WIDTH - 2.0 * MARGIN)
}

fn y_of(precision: f64) -> f64 {
    HEIGHT - MARGIN - precision * (HEIGHT - 2.0 * MARGIN)
}

/// Render one or more named curves into an SVG file. Both axes span [0, 1].
pub fn write_pr_svg(path: &Path, curves: &[(&str, &[(f64, f64)])], title: &str) -> Result<()> {
    if curves.is_empty() || curves.iter().any(|(_, c)| c.is_empty()) {
        return Err(Error::Eval("nothing to plot".into()));
    }
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        w,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        title
    )?;

    // axes with ticks every 0.2
    writeln!(
        w,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    )?;
    writeln!(
        w,
        r#"<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    )?;
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.1}</text>"#,
            x_of(v),
            HEIGHT - MARGIN + 18.0
        )?;
        writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.1}</text>"#,
            MARGIN - 8.0,
            y_of(v) + 4.0
        )?;
        writeln!(
            w,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#dddddd"/>"##,
            x_of(v),
            MARGIN,
            x_of(v),
            HEIGHT - MARGIN
        )?;
        writeln!(
            w,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#dddddd"/>"##,
            MARGIN,
            y_of(v),
            WIDTH - MARGIN,
            y_of(v)
        )?;
    }
    writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">recall</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    )?;
    writeln!(
        w,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">precision</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )?;

    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = palette[i % palette.len()];
        let points: Vec<String> = curve
            .iter()
            .map(|&(r, p)| format!("{:.2},{:.2}", x_of(r), y_of(p)))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )?;
        let ly = MARGIN + 16.0 * i as f64 + 8.0;
        writeln!(
            w,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            WIDTH - MARGIN - 90.0,
            lx = WIDTH - MARGIN - 118.0,
        )?;
        writeln!(
            w,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{name}</text>"#,
            WIDTH - MARGIN - 84.0,
            ly + 4.0
        )?;
    }
    writeln!(w, "</svg>")?;
    w.flush()?;
    Ok(())
}
