//! Static SVG plots from sweep and evaluation CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed CSV: header plus rows tagged with their 1-based line numbers.
#[derive(Clone, Debug)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    /// Parses text, skipping `#` comment lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(false).from_reader(text.as_bytes());
        let headers: Vec<String> =
            reader.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.iter().map(|h| h.trim().to_string()).collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(Error::Parse { line: 1, msg: "missing header".into() });
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse { line: e.position().map(|p| p.line() as usize).unwrap_or(0), msg: e.to_string() })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            rows.push((line, rec.iter().map(|s| s.trim().to_string()).collect()));
        }
        if rows.is_empty() {
            return Err(Error::Parse { line: 1, msg: "no data rows".into() });
        }
        Ok(Self { headers, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            return Err(Error::Parse { line: 1, msg: format!("{} is empty", path.display()) });
        }
        Self::parse(&text)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column '{name}'") })
    }

    fn number(&self, row: usize, col: usize) -> Result<f64> {
        let (line, cells) = &self.rows[row];
        cells[col].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
            line: *line,
            msg: format!("column '{}' holds '{}', expected a number", self.headers[col], cells[col]),
        })
    }
}

const W: f64 = 640.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

struct Frame {
    top: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        MARGIN_L + (v - self.x.0) / (self.x.1 - self.x.0) * (W - MARGIN_L - MARGIN_R)
    }

    fn py(&self, v: f64) -> f64 {
        self.top + MARGIN_T + (1.0 - (v - self.y.0) / (self.y.1 - self.y.0)) * (PANEL_H - MARGIN_T - MARGIN_B)
    }

    fn axes(&self, s: &mut String, x_label: &str, y_label: &str, title: &str) {
        let (x0, x1) = (MARGIN_L, W - MARGIN_R);
        let (y0, y1) = (self.top + MARGIN_T, self.top + PANEL_H - MARGIN_B);
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
        for i in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0;
            let _ =
                writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#, self.px(fx), y1 + 14.0, tick(fx));
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                self.py(fy) + 3.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            y1 + 32.0,
            esc(x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(y_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            self.top + 18.0,
            esc(title)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_doc(height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" viewBox=\"0 0 {W} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Points drawn per series, by series name.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSummary {
    pub series: Vec<(String, usize)>,
}

/// One panel per metric column against `x_column`, from a sweep CSV.
pub fn line_plot(table: &Table, x_column: &str) -> Result<(String, PlotSummary)> {
    let xc = table.column(x_column)?;
    let xs: Vec<f64> = (0..table.rows.len()).map(|r| table.number(r, xc)).collect::<Result<_>>()?;
    let metrics: Vec<usize> = (0..table.headers.len()).filter(|&c| c != xc).collect();
    let mut body = String::new();
    let mut series = Vec::new();
    for (panel, &mc) in metrics.iter().enumerate() {
        let ys: Vec<f64> = (0..table.rows.len()).map(|r| table.number(r, mc)).collect::<Result<_>>()?;
        let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let frame = Frame { top: panel as f64 * PANEL_H, x: span(xs.iter().copied()), y: span(pts.iter().map(|p| p.1)) };
        let name = &table.headers[mc];
        frame.axes(&mut body, x_column, name, &format!("{name} vs {x_column}"));
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let color = COLORS[panel % COLORS.len()];
        let _ = writeln!(body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in &pts {
            let _ = writeln!(body, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, frame.px(x), frame.py(y));
        }
        series.push((name.clone(), pts.len()));
    }
    Ok((svg_doc(PANEL_H * metrics.len() as f64, &body), PlotSummary { series }))
}

/// PSNR against `lpips_proxy`, one series per labelled report. Aggregate
/// rows (`mean`, `blurry_input`) are drawn as larger markers.
pub fn scatter_plot(reports: &[(String, Table)]) -> Result<(String, PlotSummary)> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("scatter plot needs at least one report".into()));
    }
    let mut sets = Vec::new();
    for (label, t) in reports {
        let (pc, lc, ic) = (t.column("psnr")?, t.column("lpips_proxy")?, t.column("sample_id")?);
        let pts: Vec<(f64, f64, bool)> = (0..t.rows.len())
            .map(|r| {
                let agg = matches!(t.rows[r].1[ic].as_str(), "mean" | "blurry_input");
                Ok((t.number(r, pc)?, t.number(r, lc)?, agg))
            })
            .collect::<Result<_>>()?;
        sets.push((label.clone(), pts));
    }
    let all = || sets.iter().flat_map(|(_, p)| p.iter());
    let frame = Frame { top: 0.0, x: span(all().map(|p| p.0)), y: span(all().map(|p| p.1)) };
    let mut body = String::new();
    frame.axes(&mut body, "psnr (dB)", "lpips_proxy", "perception-distortion");
    let mut series = Vec::new();
    for (i, (label, pts)) in sets.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for &(x, y, agg) in pts {
            let r = if agg { 6 } else { 2 };
            let _ =
                writeln!(body, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}" fill-opacity="0.7"/>"#, frame.px(x), frame.py(y));
        }
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{}</text>"#,
            W - MARGIN_R - 150.0,
            MARGIN_T + 14.0 * (i + 1) as f64,
            esc(label)
        );
        series.push((label.clone(), pts.len()));
    }
    Ok((svg_doc(PANEL_H + 60.0, &body), PlotSummary { series }))
}

/// Writes only after the plot rendered successfully.
pub fn write_svg(svg: &str, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}
