//! Minimal static SVG charts: per-epoch loss curves, embedding scatter
//! plots, and grouped bars with error whiskers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Result, ScingError};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in it.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    );
}

fn axes(svg: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        svg,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let x = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            l - 4.0,
            f.py(y) + 4.0,
            tick(y)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            f.px(x),
            b + 16.0,
            tick(x)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(svg: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            color(i),
            x + 15.0,
            y,
            escape(n)
        );
    }
}

/// A named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let f = Frame::new(all().map(|p| p.0), all().map(|p| p.1));
    let mut svg = String::new();
    header(&mut svg, title);
    axes(&mut svg, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            color(i)
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

/// A labelled point; points sharing `group` share a color.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub group: String,
    pub x: f64,
    pub y: f64,
    /// Drawn as a square instead of a circle.
    pub marked: bool,
}

pub fn scatter(title: &str, points: &[Point]) -> String {
    let f = Frame::new(points.iter().map(|p| p.x), points.iter().map(|p| p.y));
    let mut groups: Vec<&str> = Vec::new();
    for p in points {
        if !groups.contains(&p.group.as_str()) {
            groups.push(&p.group);
        }
    }
    let mut svg = String::new();
    header(&mut svg, title);
    axes(&mut svg, &f, "PC1", "PC2");
    for p in points {
        let c = color(groups.iter().position(|g| *g == p.group).unwrap_or(0));
        let (x, y) = (f.px(p.x), f.py(p.y));
        if p.marked {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{c}" stroke="black"/>"#,
                x - 4.0,
                y - 4.0
            );
        } else {
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{c}" fill-opacity="0.6"/>"#
            );
        }
    }
    if groups.len() <= 12 {
        legend(&mut svg, &groups);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Bars for one category: `(value, error)` per series.
#[derive(Clone, Debug, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub bars: Vec<(f64, f64)>,
}

pub fn bar_chart(title: &str, series: &[&str], groups: &[BarGroup]) -> String {
    let top = groups
        .iter()
        .flat_map(|g| g.bars.iter().map(|(v, e)| v + e))
        .fold(0.0f64, f64::max);
    let f = Frame {
        x0: 0.0,
        x1: groups.len().max(1) as f64,
        y0: 0.0,
        y1: if top > 0.0 { top * 1.1 } else { 1.0 },
    };
    let mut svg = String::new();
    header(&mut svg, title);
    let (l, r, b) = (LEFT, W - RIGHT, H - BOTTOM);
    let _ = writeln!(
        svg,
        r#"<path d="M{l},{TOP} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let y = f.y1 * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            l - 4.0,
            f.py(y) + 4.0,
            tick(y)
        );
    }
    let n = series.len().max(1) as f64;
    let slot = (f.px(1.0) - f.px(0.0)) * 0.8 / n;
    for (gi, g) in groups.iter().enumerate() {
        let x_start = f.px(gi as f64) + (f.px(1.0) - f.px(0.0)) * 0.1;
        for (si, (v, e)) in g.bars.iter().enumerate() {
            let x = x_start + slot * si as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                f.py(*v),
                slot * 0.9,
                (f.py(0.0) - f.py(*v)).max(0.0),
                color(si)
            );
            if *e > 0.0 {
                let cx = x + slot * 0.45;
                let _ = writeln!(
                    svg,
                    r#"<path d="M{cx:.2},{:.2} L{cx:.2},{:.2}" stroke="black"/>"#,
                    f.py(v - e),
                    f.py(v + e)
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            f.px(gi as f64 + 0.5),
            b + 16.0,
            escape(&g.label)
        );
    }
    legend(&mut svg, series);
    svg.push_str("</svg>\n");
    svg
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(ScingError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let err = |e: csv::Error| ScingError::Data(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .map(|r| r.map_err(err))
        .collect()
}

#[derive(Deserialize)]
struct EpochRow {
    stage: u8,
    epoch: usize,
    l_clip: Option<f64>,
    l_con: Option<f64>,
    mean_cos: Option<f64>,
    l_ce: Option<f64>,
    l_trp: Option<f64>,
}

/// Loss curves from an `epochs.csv` log, one chart per stage.
pub fn plot_epoch_log(path: &Path) -> Result<Vec<(String, String)>> {
    let rows: Vec<EpochRow> = read_rows(path)?;
    let pick = |stage: u8, name: &str, f: fn(&EpochRow) -> Option<f64>| Series {
        name: name.to_string(),
        points: rows
            .iter()
            .filter(|r| r.stage == stage)
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect(),
    };
    let mut out = Vec::new();
    let s1 = [
        pick(1, "L_clip", |r| r.l_clip),
        pick(1, "L_con", |r| r.l_con),
        pick(1, "mean cos", |r| r.mean_cos),
    ];
    if !s1[0].points.is_empty() {
        out.push(("stage1_losses.svg".to_string(), line_chart("Stage 1", "epoch", "loss", &s1)));
    }
    let s2 = [pick(2, "L_ce", |r| r.l_ce), pick(2, "L_trp", |r| r.l_trp)];
    if !s2[0].points.is_empty() {
        out.push(("stage2_losses.svg".to_string(), line_chart("Stage 2", "epoch", "loss", &s2)));
    }
    if out.is_empty() {
        return Err(ScingError::Data(format!("{}: no epoch rows", path.display())));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ProjRow {
    kind: String,
    identity: usize,
    x: f64,
    y: f64,
}

/// Scatter of an embedding projection CSV (`kind,identity,x,y`).
pub fn plot_projection(path: &Path) -> Result<String> {
    let rows: Vec<ProjRow> = read_rows(path)?;
    let points: Vec<Point> = rows
        .into_iter()
        .map(|r| Point {
            group: format!("id {}", r.identity),
            x: r.x,
            y: r.y,
            marked: r.kind == "text",
        })
        .collect();
    Ok(scatter("Image and text embeddings (squares: text)", &points))
}

/// Bar chart of an ablation table CSV.
pub fn plot_ablation(path: &Path) -> Result<String> {
    let rows = crate::ablation::read_table(path)?;
    let groups: Vec<BarGroup> = rows
        .iter()
        .map(|r| BarGroup {
            label: r.variant.clone(),
            bars: vec![(100.0 * r.map_mean, 100.0 * r.map_sd), (100.0 * r.rank1_mean, 100.0 * r.rank1_sd)],
        })
        .collect();
    Ok(bar_chart("Ablation", &["mAP", "Rank-1"], &groups))
}

/// Renders every input by its header and writes the charts into `out_dir`.
/// Returns the written paths.
pub fn plot_files(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| ScingError::io(out_dir, e))?;
    let mut written = Vec::new();
    for input in inputs {
        let head = std::fs::read_to_string(input)
            .map_err(|e| ScingError::io(input, e))?
            .lines()
            .next()
            .unwrap_or_default()
            .to_string();
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("chart").to_string();
        let charts = if head.starts_with("stage,epoch,lr") {
            plot_epoch_log(input)?
        } else if head == "kind,identity,x,y" {
            vec![(format!("{stem}.svg"), plot_projection(input)?)]
        } else if head.starts_with("variant,runs,") {
            vec![(format!("{stem}.svg"), plot_ablation(input)?)]
        } else {
            return Err(ScingError::Data(format!(
                "{}: unrecognized CSV header {head:?}",
                input.display()
            )));
        };
        for (name, svg) in charts {
            let p = out_dir.join(name);
            std::fs::write(&p, svg).map_err(|e| ScingError::io(&p, e))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_closed_svg() {
        let s = line_chart(
            "t",
            "x",
            "y",
            &[Series {
                name: "a<b".into(),
                points: vec![(1.0, 2.0), (2.0, 1.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        let b = bar_chart(
            "t",
            &["m"],
            &[BarGroup {
                label: "x".into(),
                bars: vec![(3.0, 0.5)],
            }],
        );
        assert!(b.contains("<rect x="));
    }

    #[test]
    fn missing_input_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(plot_files(&[dir.path().join("nope.csv")], dir.path()).is_err());
    }
}
