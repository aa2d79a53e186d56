use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::aggregate::{cmp_values, AggregateRow};
use crate::error::{config_err, input_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Metric against log-scaled dataset size, one line per series, std error bars.
    LinesVsSize,
    /// One cluster per group, one bar per policy.
    GroupedBars,
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lines_vs_size" => Ok(PlotKind::LinesVsSize),
            "grouped_bars" => Ok(PlotKind::GroupedBars),
            other => Err(config_err!("unknown plot kind `{other}` (lines_vs_size or grouped_bars)")),
        }
    }
}

/// One plotted value, as written to the sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct SidecarRow {
    pub series: String,
    pub x: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn join_except(row: &AggregateRow, skip: &str) -> String {
    let parts: Vec<&str> = row.key.iter().filter(|(k, _)| k != skip).map(|(_, v)| v.as_str()).collect();
    if parts.is_empty() {
        "all".into()
    } else {
        parts.join("/")
    }
}

fn require(rows: &[AggregateRow], field: &str) -> Result<()> {
    if rows.iter().any(|r| r.get(field).is_none()) {
        return Err(config_err!("plot needs the `{field}` axis in the aggregate"));
    }
    Ok(())
}

fn sidecar_rows(rows: &[AggregateRow], kind: PlotKind) -> Result<Vec<SidecarRow>> {
    if rows.is_empty() {
        return Err(input_err!("nothing to plot"));
    }
    let (x_field, series_of): (&str, Box<dyn Fn(&AggregateRow) -> (String, String)>) = match kind {
        PlotKind::LinesVsSize => ("size", Box::new(|r| (join_except(r, "size"), r.get("size").unwrap_or_default().to_string()))),
        PlotKind::GroupedBars => ("policy", Box::new(|r| (r.get("policy").unwrap_or_default().to_string(), join_except(r, "policy")))),
    };
    require(rows, x_field)?;
    if kind == PlotKind::LinesVsSize {
        for r in rows {
            let s = r.get("size").unwrap_or_default();
            if s.parse::<f64>().map_or(true, |v| v <= 0.0) {
                return Err(input_err!("size `{s}` cannot be placed on a log axis"));
            }
        }
    }
    Ok(rows
        .iter()
        .map(|r| {
            let (series, x) = series_of(r);
            SidecarRow { series, x, mean: r.mean, std: r.std, n: r.n }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn new(points: &[SidecarRow]) -> Self {
        let lo = points.iter().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.mean + p.std).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(1e-3 * hi.abs().max(1.0));
        Self { y_lo: lo - pad, y_hi: hi + pad }
    }

    fn y(&self, v: f64) -> f64 {
        TOP + (H - TOP - BOTTOM) * (1.0 - (v - self.y_lo) / (self.y_hi - self.y_lo))
    }

    fn axes(&self, svg: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (x0, x1, y0) = (LEFT, W - RIGHT, H - BOTTOM);
        let _ = write!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>
<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>
<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>
"#,
            W / 2.0,
            escape(title),
            (x0 + x1) / 2.0,
            H - 8.0,
            escape(x_label),
            (TOP + y0) / 2.0,
            (TOP + y0) / 2.0,
            escape(y_label)
        );
        for i in 0..=4 {
            let v = self.y_lo + (self.y_hi - self.y_lo) * f64::from(i) / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                svg,
                r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end" font-size="10">{v:.3}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                y + 3.0
            );
        }
    }
}

fn legend(svg: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
            W - RIGHT + 12.0,
            y,
            COLORS[i % COLORS.len()],
            W - RIGHT + 26.0,
            y + 9.0,
            escape(name)
        );
    }
}

fn error_bar(svg: &mut String, frame: &Frame, x: f64, p: &SidecarRow, color: &str) {
    let (a, b) = (frame.y(p.mean - p.std), frame.y(p.mean + p.std));
    let _ = writeln!(
        svg,
        r#"<line x1="{x:.2}" y1="{a:.2}" x2="{x:.2}" y2="{b:.2}" stroke="{color}"/><line x1="{:.2}" y1="{a:.2}" x2="{:.2}" y2="{a:.2}" stroke="{color}"/><line x1="{:.2}" y1="{b:.2}" x2="{:.2}" y2="{b:.2}" stroke="{color}"/>"#,
        x - 3.0,
        x + 3.0,
        x - 3.0,
        x + 3.0
    );
}

fn ordered(mut v: Vec<String>) -> Vec<String> {
    v.sort_by(|a, b| cmp_values(a, b));
    v.dedup();
    v
}

fn render(points: &[SidecarRow], kind: PlotKind, title: &str, metric: &str) -> String {
    let frame = Frame::new(points);
    let series = ordered(points.iter().map(|p| p.series.clone()).collect());
    let xs = ordered(points.iter().map(|p| p.x.clone()).collect());
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">
<rect width="100%" height="100%" fill="white"/>
"#
    );
    let plot_w = W - RIGHT - LEFT;
    match kind {
        PlotKind::LinesVsSize => {
            frame.axes(&mut svg, title, "fine-tuning set size (log scale)", metric);
            let logs: Vec<f64> = xs.iter().map(|x| x.parse::<f64>().expect("checked").log10()).collect();
            let (l0, l1) = (logs[0], logs[logs.len() - 1]);
            let px = |x: &str| {
                let l = x.parse::<f64>().expect("checked").log10();
                if l1 > l0 {
                    LEFT + 20.0 + (plot_w - 40.0) * (l - l0) / (l1 - l0)
                } else {
                    LEFT + plot_w / 2.0
                }
            };
            for x in &xs {
                let _ = writeln!(svg, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#, px(x), H - BOTTOM + 14.0, escape(x));
            }
            for (si, s) in series.iter().enumerate() {
                let color = COLORS[si % COLORS.len()];
                let mut pts: Vec<&SidecarRow> = points.iter().filter(|p| &p.series == s).collect();
                pts.sort_by(|a, b| cmp_values(&a.x, &b.x));
                let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(&p.x), frame.y(p.mean))).collect();
                let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, line.join(" "));
                for p in pts {
                    error_bar(&mut svg, &frame, px(&p.x), p, color);
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>{} @ {}: {} ± {} (n={})</title></circle>"#,
                        px(&p.x),
                        frame.y(p.mean),
                        escape(&p.series),
                        escape(&p.x),
                        p.mean,
                        p.std,
                        p.n
                    );
                }
            }
        }
        PlotKind::GroupedBars => {
            frame.axes(&mut svg, title, "", metric);
            let group_w = plot_w / xs.len() as f64;
            let bar_w = group_w * 0.8 / series.len() as f64;
            let base = frame.y(frame.y_lo.max(0.0).min(frame.y_hi));
            for (gi, g) in xs.iter().enumerate() {
                let g0 = LEFT + group_w * gi as f64 + group_w * 0.1;
                let _ = writeln!(svg, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#, g0 + group_w * 0.4, H - BOTTOM + 14.0, escape(g));
                for (si, s) in series.iter().enumerate() {
                    let Some(p) = points.iter().find(|p| &p.x == g && &p.series == s) else {
                        continue;
                    };
                    let color = COLORS[si % COLORS.len()];
                    let x = g0 + bar_w * si as f64;
                    let y = frame.y(p.mean);
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"><title>{} / {}: {} ± {} (n={})</title></rect>"#,
                        y.min(base),
                        bar_w * 0.9,
                        (base - y).abs(),
                        escape(g),
                        escape(s),
                        p.mean,
                        p.std,
                        p.n
                    );
                    error_bar(&mut svg, &frame, x + bar_w * 0.45, p, "black");
                }
            }
        }
    }
    legend(&mut svg, &series);
    svg.push_str("</svg>\n");
    svg
}

fn sidecar_path(svg: &Path) -> PathBuf {
    svg.with_extension("tsv")
}

/// Writes an SVG figure and a `.tsv` sidecar with the exact plotted values
/// (`series`, `x`, `mean`, `std`, `n`). Returns the sidecar path.
pub fn emit_plot(rows: &[AggregateRow], kind: PlotKind, svg_path: &Path, title: &str, metric: &str) -> Result<PathBuf> {
    let points = sidecar_rows(rows, kind)?;
    if let Some(dir) = svg_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(svg_path, render(&points, kind, title, metric)).map_err(|e| Error::io(svg_path, e))?;
    let mut tsv = String::from("series\tx\tmean\tstd\tn\n");
    for p in &points {
        // `{}` prints the shortest representation that parses back to the same f64
        let _ = writeln!(tsv, "{}\t{}\t{}\t{}\t{}", p.series, p.x, p.mean, p.std, p.n);
    }
    let side = sidecar_path(svg_path);
    fs::write(&side, tsv).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("series\tx\tmean\tstd\tn") {
        return Err(Error::Format(format!("{}: bad sidecar header", path.display())));
    }
    let bad = |l: &str| Error::Format(format!("{}: bad sidecar line `{l}`", path.display()));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            Ok(SidecarRow {
                series: f[0].into(),
                x: f[1].into(),
                mean: f[2].parse().map_err(|_| bad(l))?,
                std: f[3].parse().map_err(|_| bad(l))?,
                n: f[4].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

/// Sidecar rows keyed by `(series, x)`, handy for comparisons.
pub fn sidecar_map(rows: &[SidecarRow]) -> BTreeMap<(String, String), (f64, f64, usize)> {
    rows.iter().map(|r| ((r.series.clone(), r.x.clone()), (r.mean, r.std, r.n))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<AggregateRow> {
        let mut out = Vec::new();
        for (pi, p) in ["surgical:1-3", "surgical:4-6", "surgical:7-9", "surgical:10-12"].iter().enumerate() {
            for (si, s) in [100, 1000, 10000, 75312].iter().enumerate() {
                out.push(AggregateRow {
                    key: vec![("policy".into(), p.to_string()), ("size".into(), s.to_string())],
                    n: 3,
                    mean: 0.6 + 0.01 * pi as f64 + 0.1 / 3.0 * si as f64,
                    std: if si == 0 { 0.0 } else { 0.0123456789 },
                });
            }
        }
        out
    }

    #[test]
    fn lines_figure_structure_and_exact_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("fig1.svg");
        let side = emit_plot(&rows(), PlotKind::LinesVsSize, &svg, "t", "mean AUC").unwrap();
        let text = fs::read_to_string(&svg).unwrap();
        assert_eq!(text.matches("<polyline").count(), 4);
        assert_eq!(text.matches("<circle").count(), 16);
        let back = read_sidecar(&side).unwrap();
        assert_eq!(back.len(), 16);
        for (r, s) in rows().iter().zip(&back) {
            assert_eq!((r.mean, r.std, r.n), (s.mean, s.std, s.n));
            assert_eq!(s.series, r.get("policy").unwrap());
            assert_eq!(s.x, r.get("size").unwrap());
        }
    }

    #[test]
    fn bars_and_missing_axes() {
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("fig2.svg");
        emit_plot(&rows(), PlotKind::GroupedBars, &svg, "t", "mean AUC").unwrap();
        assert_eq!(fs::read_to_string(&svg).unwrap().matches("<rect x=").count(), 16 + 4);
        let no_size: Vec<AggregateRow> = rows()
            .into_iter()
            .map(|mut r| {
                r.key.retain(|(k, _)| k != "size");
                r
            })
            .collect();
        let e = emit_plot(&no_size, PlotKind::LinesVsSize, &svg, "t", "m").unwrap_err();
        assert!(e.to_string().contains("`size`"), "{e}");
        assert_eq!(emit_plot(&[], PlotKind::GroupedBars, &svg, "t", "m").unwrap_err().kind(), "input");
    }
}
