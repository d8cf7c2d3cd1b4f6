//! Plain SVG rendering of forecast overlays and training curves.

use std::fmt::Write;

use lblm::{LblmError, Result};

const PANEL_W: f64 = 720.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A parsed CSV: header, rows and the `config_hash` comment if present.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub config_hash: Option<String>,
}

pub fn parse_table(text: &str) -> Result<Table> {
    let config_hash = text
        .lines()
        .find_map(|l| l.strip_prefix("# config_hash="))
        .map(|s| s.trim().to_string());
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rd
        .headers()
        .map_err(|e| LblmError::config(format!("bad csv header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| LblmError::config(format!("bad csv row: {e}")))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows, config_hash })
}

impl Table {
    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn num(&self, row: usize, col: usize) -> Result<Option<f64>> {
        let cell = self.rows[row][col].trim();
        if cell.is_empty() {
            return Ok(None);
        }
        cell.parse()
            .map(Some)
            .map_err(|_| LblmError::config(format!("`{cell}` in column {} is not a number", self.header[col])))
    }
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dash: bool) {
    if pts.is_empty() {
        return;
    }
    let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dash { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\"{dash} points=\"{}\"/>",
        d.join(" ")
    );
}

struct Frame {
    top: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(top: f64, xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Frame { top, x0, x1, y0, y1 }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = PANEL_W - 2.0 * MARGIN;
        let h = PANEL_H - 2.0 * MARGIN;
        (
            MARGIN + (x - self.x0) / (self.x1 - self.x0) * w,
            self.top + PANEL_H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * h,
        )
    }

    fn axes(&self, out: &mut String, title: &str) {
        let (l, b) = self.map(self.x0, self.y0);
        let (r, t) = self.map(self.x1, self.y1);
        let _ = writeln!(
            out,
            "<rect x=\"{l:.2}\" y=\"{t:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#999\"/>",
            r - l,
            b - t
        );
        let _ = writeln!(out, "<text x=\"{l:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>", t - 6.0, escape(title));
        let _ = writeln!(
            out,
            "<text x=\"{l:.2}\" y=\"{:.2}\" font-size=\"10\">{} .. {}</text>",
            b + 14.0,
            fmt_tick(self.x0),
            fmt_tick(self.x1)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">y {} .. {}</text>",
            r - 140.0,
            b + 14.0,
            fmt_tick(self.y0),
            fmt_tick(self.y1)
        );
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in v.filter(|x| x.is_finite()) {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn document(panels: usize, body: &str, config_hash: Option<&str>) -> String {
    let h = PANEL_H * panels.max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PANEL_W}\" height=\"{h}\" viewBox=\"0 0 {PANEL_W} {h}\">"
    );
    if let Some(hash) = config_hash {
        let _ = writeln!(s, "<!-- config_hash={hash} -->");
    }
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

/// One panel per (segment, channel): truth solid, prediction dashed, and a
/// vertical marker where the prediction starts.
fn overlay_svg(t: &Table) -> Result<String> {
    let need = |n: &str| t.col(n).ok_or_else(|| LblmError::config(format!("overlay csv lacks `{n}`")));
    let (cs, cc, cl, ct, ctr, cp) = (
        need("segment")?,
        need("channel")?,
        need("context_len")?,
        need("t")?,
        need("truth")?,
        need("prediction")?,
    );
    let mut panels: Vec<((String, String), usize, Vec<(f64, f64, Option<f64>)>)> = Vec::new();
    for i in 0..t.rows.len() {
        let key = (t.rows[i][cs].clone(), t.rows[i][cc].clone());
        let ctx = t.rows[i][cl]
            .parse::<usize>()
            .map_err(|_| LblmError::config("context_len is not an integer"))?;
        let x = t.num(i, ct)?.ok_or_else(|| LblmError::config("empty t"))?;
        let y = t.num(i, ctr)?.ok_or_else(|| LblmError::config("empty truth"))?;
        let p = t.num(i, cp)?;
        match panels.last_mut() {
            Some((k, _, pts)) if *k == key => pts.push((x, y, p)),
            _ => panels.push((key, ctx, vec![(x, y, p)])),
        }
    }
    if panels.is_empty() {
        return Err(LblmError::config("overlay csv has no rows"));
    }
    let mut body = String::new();
    for (i, ((seg, ch), ctx, pts)) in panels.iter().enumerate() {
        let ys = pts.iter().flat_map(|p| std::iter::once(p.1).chain(p.2));
        let f = Frame::new(i as f64 * PANEL_H, pts.iter().map(|p| p.0), ys);
        f.axes(&mut body, &format!("segment {seg}, channel {ch}"));
        let truth: Vec<_> = pts.iter().map(|p| f.map(p.0, p.1)).collect();
        let pred: Vec<_> = pts.iter().filter_map(|p| p.2.map(|y| f.map(p.0, y))).collect();
        polyline(&mut body, &truth, COLORS[0], false);
        polyline(&mut body, &pred, COLORS[1], true);
        let (mx, top) = f.map(*ctx as f64, f.y1);
        let (_, bot) = f.map(*ctx as f64, f.y0);
        let _ = writeln!(
            body,
            "<line class=\"prediction-start\" x1=\"{mx:.2}\" y1=\"{top:.2}\" x2=\"{mx:.2}\" y2=\"{bot:.2}\" stroke=\"#555\" stroke-dasharray=\"2 2\"/>"
        );
    }
    Ok(document(panels.len(), &body, t.config_hash.as_deref()))
}

/// Loss and accuracy columns against epoch; pretraining logs may hold
/// several stages, each drawn as its own series.
fn curves_svg(t: &Table) -> Result<String> {
    let ce = t.col("epoch").ok_or_else(|| LblmError::config("log csv lacks `epoch`"))?;
    let stage = t.col("stage");
    let series: Vec<usize> = (0..t.header.len())
        .filter(|&c| t.header[c].contains("loss") || t.header[c].contains("accuracy"))
        .collect();
    if series.is_empty() || t.rows.is_empty() {
        return Err(LblmError::config("log csv has no loss or accuracy columns"));
    }
    let mut body = String::new();
    for (pi, &c) in series.iter().enumerate() {
        let mut lines: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for i in 0..t.rows.len() {
            let name = stage.map_or(String::new(), |s| t.rows[i][s].clone());
            let (Some(x), Some(y)) = (t.num(i, ce)?, t.num(i, c)?) else { continue };
            match lines.iter_mut().find(|l| l.0 == name) {
                Some(l) => l.1.push((x, y)),
                None => lines.push((name, vec![(x, y)])),
            }
        }
        let all = lines.iter().flat_map(|l| l.1.iter().copied());
        let f = Frame::new(pi as f64 * PANEL_H, all.clone().map(|p| p.0), all.map(|p| p.1));
        f.axes(&mut body, &t.header[c]);
        for (li, (name, pts)) in lines.iter().enumerate() {
            let mapped: Vec<_> = pts.iter().map(|&(x, y)| f.map(x, y)).collect();
            polyline(&mut body, &mapped, COLORS[li % COLORS.len()], false);
            if !name.is_empty() {
                let _ = writeln!(
                    body,
                    "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"{}\">{}</text>",
                    PANEL_W - MARGIN - 60.0,
                    f.top + MARGIN + 12.0 * (li as f64 + 1.0),
                    COLORS[li % COLORS.len()],
                    escape(name)
                );
            }
        }
    }
    Ok(document(series.len(), &body, t.config_hash.as_deref()))
}

/// Renders an overlay CSV or a training log CSV, chosen by its columns.
pub fn render(csv_text: &str) -> Result<String> {
    let t = parse_table(csv_text)?;
    if t.col("truth").is_some() {
        overlay_svg(&t)
    } else if t.col("epoch").is_some() {
        curves_svg(&t)
    } else {
        Err(LblmError::config("csv is neither an overlay export nor a training log"))
    }
}
