//! Standalone SVG renderings of balance and effect estimates.

use std::fmt::Write;

use crate::balance::BalanceReport;
use crate::error::{Error, Result};
use crate::estimate::EffectEstimate;

const WIDTH: f64 = 640.0;
const LEFT: f64 = 150.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const ROW: f64 = 24.0;
const PALETTE: [&str; 9] =
    ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn header(out: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Maps `[lo, hi]` onto the plotting band.
struct Scale {
    lo: f64,
    hi: f64,
}

impl Scale {
    fn x(&self, v: f64) -> f64 {
        LEFT + (v - self.lo) / (self.hi - self.lo) * (WIDTH - LEFT - RIGHT)
    }
}

fn axis(out: &mut String, scale: &Scale, y: f64) {
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#,
        scale.x(scale.lo),
        scale.x(scale.hi)
    );
    for k in 0..=4 {
        let v = scale.lo + (scale.hi - scale.lo) * f64::from(k) / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            scale.x(v),
            y + 16.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Love plot of absolute standardized mean differences per covariate, one
/// marker series for the unweighted sample and one per method, with a
/// reference line at 0.1.
pub fn emit_svg_love(report: &BalanceReport) -> Result<String> {
    if report.baseline.is_empty() {
        return Err(Error::InvalidConfig("balance report has no covariates".into()));
    }
    let mut series: Vec<(String, Vec<f64>)> =
        vec![("Unweighted".into(), report.baseline.iter().map(|r| r.smd.abs()).collect())];
    for m in &report.methods {
        series.push((m.method.to_string(), m.rows.iter().map(|r| r.smd.abs()).collect()));
    }
    let max = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.1, f64::max);
    let scale = Scale { lo: 0.0, hi: max * 1.1 };
    let n = report.baseline.len() as f64;
    let legend_y = TOP + n * ROW + 40.0;
    let height = legend_y + series.len() as f64 * 16.0 + 10.0;

    let mut out = String::new();
    header(&mut out, height, "Covariate balance (absolute standardized mean difference)");
    let bottom = TOP + n * ROW;
    let _ = writeln!(
        out,
        r##"<line class="ref" x1="{x:.2}" y1="{TOP:.2}" x2="{x:.2}" y2="{bottom:.2}" stroke="#888888" stroke-dasharray="4 3"/>"##,
        x = scale.x(0.1)
    );
    for (i, row) in report.baseline.iter().enumerate() {
        let y = TOP + (i as f64 + 0.5) * ROW;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            y + 4.0,
            escape(&row.covariate)
        );
        for (k, (name, vals)) in series.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<circle class="smd" data-method="{}" cx="{:.2}" cy="{y:.2}" r="4" fill="{}"/>"#,
                escape(name),
                scale.x(vals[i]),
                PALETTE[k % PALETTE.len()]
            );
        }
    }
    axis(&mut out, &scale, bottom);
    for (k, (name, _)) in series.iter().enumerate() {
        let y = legend_y + k as f64 * 16.0;
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            LEFT,
            y - 8.0,
            PALETTE[k % PALETTE.len()],
            LEFT + 14.0,
            y,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Forest plot: one point estimate and confidence segment per method, with a
/// dashed line at zero when it falls inside the range.
pub fn emit_svg_forest(estimates: &[EffectEstimate]) -> Result<String> {
    if estimates.is_empty() {
        return Err(Error::InvalidConfig("no estimates to plot".into()));
    }
    let lo = estimates.iter().map(|e| e.ci_low).fold(f64::INFINITY, f64::min);
    let hi = estimates.iter().map(|e| e.ci_high).fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    let scale = Scale { lo: lo - pad, hi: hi + pad };
    let n = estimates.len() as f64;
    let bottom = TOP + n * ROW;
    let height = bottom + 30.0;

    let mut out = String::new();
    header(&mut out, height, "Estimated treatment effects");
    if scale.lo < 0.0 && scale.hi > 0.0 {
        let _ = writeln!(
            out,
            r##"<line class="ref" x1="{x:.2}" y1="{TOP:.2}" x2="{x:.2}" y2="{bottom:.2}" stroke="#888888" stroke-dasharray="4 3"/>"##,
            x = scale.x(0.0)
        );
    }
    for (i, e) in estimates.iter().enumerate() {
        let y = TOP + (i as f64 + 0.5) * ROW;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            y + 4.0,
            escape(&e.method.to_string())
        );
        let _ = writeln!(
            out,
            r#"<line class="ci" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="1.5"/>"#,
            scale.x(e.ci_low),
            scale.x(e.ci_high)
        );
        let _ = writeln!(
            out,
            r#"<circle class="est" cx="{:.2}" cy="{y:.2}" r="4" fill="black"/>"#,
            scale.x(e.delta)
        );
    }
    axis(&mut out, &scale, bottom);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b&\"c\""), "a&lt;b&amp;&quot;c&quot;");
    }

    #[test]
    fn empty_forest_is_rejected() {
        assert!(emit_svg_forest(&[]).is_err());
    }
}
