//! Forest plot rendering as standalone SVG 1.1.
//!
//! Log odds ratios with 95% whiskers around a zero reference line, one
//! row per characteristic, stars next to significant effects and `x`
//! for effects that could not be assessed. Output bytes are a pure
//! function of the table: coordinates are formatted with fixed
//! precision, so identical inputs give identical files.

use std::io::{self, Write};

use crate::report::EffectTable;

const WIDTH: f64 = 760.0;
const MARGIN_LEFT: f64 = 235.0;
const MARGIN_RIGHT: f64 = 45.0;
const MARGIN_TOP: f64 = 46.0;
const MARGIN_BOTTOM: f64 = 42.0;
const ROW_HEIGHT: f64 = 22.0;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders the forest plot; errors only on writer failure.
pub fn forest_plot<W: Write>(table: &EffectTable, mut out: W) -> io::Result<()> {
    let n = table.rows.len();
    let height = MARGIN_TOP + ROW_HEIGHT * n as f64 + MARGIN_BOTTOM;

    // x-domain over all whiskers, always containing 0
    let mut lo = -0.1f64;
    let mut hi = 0.1f64;
    for (_, s) in table.assessed_rows() {
        lo = lo.min(s.log_ci.0);
        hi = hi.max(s.log_ci.1);
    }
    let pad = 0.06 * (hi - lo);
    lo -= pad;
    hi += pad;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let x_of = |v: f64| MARGIN_LEFT + (v - lo) / (hi - lo) * plot_w;

    writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>"#
    )?;
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        fmt(WIDTH),
        fmt(height),
        fmt(WIDTH),
        fmt(height)
    )?;
    writeln!(
        out,
        r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#,
        fmt(WIDTH),
        fmt(height)
    )?;
    writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">Effect of image characteristics, log(OR) with 95% CI</text>"#,
        fmt(MARGIN_LEFT + plot_w / 2.0)
    )?;

    // zero reference line
    let zero_x = x_of(0.0);
    writeln!(
        out,
        r##"<line x1="{x}" y1="{y1}" x2="{x}" y2="{y2}" stroke="#888888" stroke-dasharray="4 3"/>"##,
        x = fmt(zero_x),
        y1 = fmt(MARGIN_TOP - 6.0),
        y2 = fmt(MARGIN_TOP + ROW_HEIGHT * n as f64 + 6.0),
    )?;

    // axis ticks at integral log-OR values
    let first_tick = lo.ceil() as i64;
    let last_tick = hi.floor() as i64;
    let axis_y = MARGIN_TOP + ROW_HEIGHT * n as f64 + 6.0;
    for t in first_tick..=last_tick {
        let tx = x_of(t as f64);
        writeln!(
            out,
            r##"<line x1="{x}" y1="{y1}" x2="{x}" y2="{y2}" stroke="#444444"/>"##,
            x = fmt(tx),
            y1 = fmt(axis_y),
            y2 = fmt(axis_y + 5.0),
        )?;
        writeln!(
            out,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="middle">{t}</text>"#,
            x = fmt(tx),
            y = fmt(axis_y + 17.0),
        )?;
    }
    writeln!(
        out,
        r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="12" text-anchor="middle">log(OR)</text>"#,
        x = fmt(MARGIN_LEFT + plot_w / 2.0),
        y = fmt(axis_y + 33.0),
    )?;

    for (i, row) in table.rows.iter().enumerate() {
        let cy = MARGIN_TOP + ROW_HEIGHT * (i as f64 + 0.5);
        writeln!(
            out,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="12" text-anchor="end">{name}</text>"#,
            x = fmt(MARGIN_LEFT - 10.0),
            y = fmt(cy + 4.0),
            name = row.name,
        )?;
        match &row.stats {
            Some(s) => {
                let x1 = x_of(s.log_ci.0);
                let x2 = x_of(s.log_ci.1);
                let xc = x_of(s.beta);
                writeln!(
                    out,
                    r##"<line x1="{x1}" y1="{y}" x2="{x2}" y2="{y}" stroke="#2255aa" stroke-width="1.5"/>"##,
                    x1 = fmt(x1),
                    x2 = fmt(x2),
                    y = fmt(cy),
                )?;
                for xe in [x1, x2] {
                    writeln!(
                        out,
                        r##"<line x1="{x}" y1="{y1}" x2="{x}" y2="{y2}" stroke="#2255aa" stroke-width="1.5"/>"##,
                        x = fmt(xe),
                        y1 = fmt(cy - 4.0),
                        y2 = fmt(cy + 4.0),
                    )?;
                }
                writeln!(
                    out,
                    r##"<circle cx="{cx}" cy="{cy}" r="3.4" fill="#2255aa"/>"##,
                    cx = fmt(xc),
                    cy = fmt(cy),
                )?;
                if !s.stars.is_empty() {
                    writeln!(
                        out,
                        r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="12" text-anchor="start">{stars}</text>"#,
                        x = fmt(x2 + 6.0),
                        y = fmt(cy + 4.0),
                        stars = s.stars,
                    )?;
                }
            }
            None => {
                writeln!(
                    out,
                    r##"<text x="{x}" y="{y}" font-family="sans-serif" font-size="12" text-anchor="middle" fill="#777777">x</text>"##,
                    x = fmt(zero_x),
                    y = fmt(cy + 4.0),
                )?;
            }
        }
    }
    writeln!(out, "</svg>")?;
    Ok(())
}

/// Convenience wrapper returning the SVG document as a string.
pub fn forest_plot_string(table: &EffectTable) -> String {
    let mut buf = Vec::new();
    forest_plot(table, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("SVG is UTF-8")
}
