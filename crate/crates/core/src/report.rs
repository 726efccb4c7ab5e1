//! Standalone SVG line plots and the saliency grid layout.
//!
//! Plots are pure functions of their data: the same series always produce
//! the same bytes. Numbers are printed with fixed precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::interpret::{ClassSaliency, SaliencyCurve, SaliencyTimeline};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 120.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#555555"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; otherwise taken from the data.
    pub y_range: Option<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn extent(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values
        .filter(|v| v.is_finite())
        .fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .map(|(lo, hi)| if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) })
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

pub fn line_plot_svg(plot: &Plot) -> String {
    let mut out = String::new();
    header(&mut out, &plot.title);
    let (x0, x1) = extent(plot.series.iter().flat_map(|s| s.x.iter().copied())).unwrap_or((0.0, 1.0));
    let (y0, y1) = plot
        .y_range
        .or_else(|| extent(plot.series.iter().flat_map(|s| s.y.iter().copied())))
        .unwrap_or((0.0, 1.0));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            HEIGHT - MARGIN_BOTTOM + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN_LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
            sy(0.0),
            MARGIN_LEFT + pw,
            sy(0.0)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(&plot.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        MARGIN_TOP + ph / 2.0,
        escape(&plot.y_label)
    );
    for (i, s) in plot.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for (x, y) in s.x.iter().zip(&s.y) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", sx(*x), sy(*y));
            }
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            points.trim_end()
        );
        let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 22.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Placeholder panel for a class with no predicted curves.
pub fn empty_panel_svg(title: &str, message: &str) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#888">{}</text>"##,
        WIDTH / 2.0,
        HEIGHT / 2.0,
        escape(message)
    );
    out.push_str("</svg>\n");
    out
}

fn primes_as_x(curve: &SaliencyCurve) -> Vec<f64> {
    curve.primes.iter().map(|&p| p as f64).collect()
}

pub fn class_saliency_plot(curve: &SaliencyCurve) -> Plot {
    let v = curve.class.unwrap_or(0);
    Plot {
        title: format!("class {v}, epoch {}, step {}", curve.epoch, curve.step),
        x_label: "p".into(),
        y_label: "normalized W_p".into(),
        series: vec![Series {
            label: format!("class {v}"),
            x: primes_as_x(curve),
            y: curve.normalized.clone(),
        }],
        y_range: Some((-1.0, 1.0)),
    }
}

/// Averaged saliency against log(p)/sqrt(p); `normalized` rescales both to max 1.
pub fn averaged_comparison_plot(curve: &SaliencyCurve, normalized: bool) -> Plot {
    let mn: Vec<f64> = curve.primes.iter().map(|&p| (p as f64).ln() / (p as f64).sqrt()).collect();
    let (w, mn, y_range) = if normalized {
        let max = mn.iter().cloned().fold(0.0, f64::max);
        (curve.normalized.clone(), mn.iter().map(|m| m / max).collect(), Some((0.0, 1.0)))
    } else {
        (curve.scores.clone(), mn, None)
    };
    Plot {
        title: format!(
            "{}saliency vs Mestre–Nagao weight, epoch {}",
            if normalized { "normalized " } else { "" },
            curve.epoch
        ),
        x_label: "p".into(),
        y_label: if normalized { "scaled to max 1".into() } else { "value".into() },
        series: vec![
            Series {
                label: "saliency".into(),
                x: primes_as_x(curve),
                y: w,
            },
            Series {
                label: "log p / sqrt p".into(),
                x: primes_as_x(curve),
                y: mn,
            },
        ],
        y_range,
    }
}

pub fn grid_panel_name(epoch: u32, step: u32, class: usize) -> String {
    format!("saliency_e{epoch:04}_s{step:02}_c{class}.svg")
}

/// Writes one panel per (checkpoint, class) into `dir` plus `index.md`,
/// which lists every panel, marks empty classes and records checkpoint gaps.
pub fn write_saliency_grid(dir: &Path, timeline: &SaliencyTimeline) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("# Saliency grid\n\n| epoch | step | class | panel |\n|---|---|---|---|\n");
    let mut written = Vec::new();
    for entry in &timeline.entries {
        let (epoch, step, class, svg, note) = match entry {
            ClassSaliency::Curve(c) => (c.epoch, c.step, entry.class(), line_plot_svg(&class_saliency_plot(c)), ""),
            ClassSaliency::Empty { class, epoch, step } => (
                *epoch,
                *step,
                *class,
                empty_panel_svg(
                    &format!("class {class}, epoch {epoch}, step {step}"),
                    &format!("no curve predicted {class}"),
                ),
                " (empty)",
            ),
        };
        let name = grid_panel_name(epoch, step, class);
        fs::write(dir.join(&name), svg)?;
        let _ = writeln!(index, "| {epoch} | {step} | {class} | [{name}]({name}){note} |");
        written.push(name);
    }
    if !timeline.gaps.is_empty() {
        index.push_str("\n## Missing checkpoints\n\n");
        for g in &timeline.gaps {
            let _ = writeln!(index, "- epoch {}, step {}: {} ({})", g.epoch, g.step, g.path.display(), g.reason);
        }
    }
    fs::write(dir.join("index.md"), index)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::SaliencyKind;

    fn curve(class: usize) -> SaliencyCurve {
        SaliencyCurve {
            kind: SaliencyKind::ClassSigned,
            class: Some(class),
            epoch: 1,
            step: 0,
            primes: vec![2, 3, 5, 7],
            scores: vec![0.5, -1.0, 0.25, 0.0],
            normalized: vec![0.5, -1.0, 0.25, 0.0],
            count: 3,
        }
    }

    #[test]
    fn plots_are_deterministic_and_well_formed() {
        let p = class_saliency_plot(&curve(1));
        let a = line_plot_svg(&p);
        assert_eq!(a, line_plot_svg(&p.clone()));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polyline").count(), 1);
    }

    #[test]
    fn escapes_labels() {
        let p = Plot {
            title: "a<b & c".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![],
            y_range: None,
        };
        assert!(line_plot_svg(&p).contains("a&lt;b &amp; c"));
    }

    #[test]
    fn grid_lists_every_panel() {
        let dir = tempfile::tempdir().unwrap();
        let timeline = SaliencyTimeline {
            entries: vec![
                ClassSaliency::Empty { class: 0, epoch: 1, step: 0 },
                ClassSaliency::Curve(curve(1)),
            ],
            gaps: vec![],
        };
        let names = write_saliency_grid(dir.path(), &timeline).unwrap();
        assert_eq!(names.len(), 2);
        let index = fs::read_to_string(dir.path().join("index.md")).unwrap();
        assert!(index.contains("(empty)"));
        let empty = fs::read_to_string(dir.path().join(&names[0])).unwrap();
        assert!(empty.contains("no curve predicted 0"));
    }
}
