//! PGM attention maps and small SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use jn_autodiff::Tensor;

use crate::data::{TargetHistogram, DIRECTIONS};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Binary P5 grayscale image; values are scaled so the maximum maps to 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Data(format!("pgm {width}x{height} given {} values", values.len())));
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.max(0.0) * scale).round().min(255.0) as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling of a square `g × g` grid to `res × res`, sampling at pixel centres.
pub fn bilinear_upscale(grid: &[f64], g: usize, res: usize) -> Vec<f64> {
    let at = |i: usize, j: usize| grid[i * g + j];
    let coord = |u: usize| ((u as f64 + 0.5) * g as f64 / res as f64 - 0.5).clamp(0.0, (g - 1) as f64);
    let mut out = Vec::with_capacity(res * res);
    for v in 0..res {
        let y = coord(v);
        let (i0, ay) = (y.floor() as usize, y - y.floor());
        let i1 = (i0 + 1).min(g - 1);
        for u in 0..res {
            let x = coord(u);
            let (j0, ax) = (x.floor() as usize, x - x.floor());
            let j1 = (j0 + 1).min(g - 1);
            let top = at(i0, j0) * (1.0 - ax) + at(i0, j1) * ax;
            let bottom = at(i1, j0) * (1.0 - ax) + at(i1, j1) * ax;
            out.push(top * (1.0 - ay) + bottom * ay);
        }
    }
    out
}

/// Per layer: attention from the TIT row(s) to the template tokens, averaged over TIT tokens,
/// reshaped to the template grid and upscaled to `template_res²`. Empty without TIT tokens.
pub fn tit_attention_maps(attention: &[Tensor], cfg: &EncoderConfig) -> Vec<Vec<f64>> {
    let t = cfg.num_tit_tokens();
    if t == 0 {
        return Vec::new();
    }
    let nz = cfg.num_template_tokens();
    let g = cfg.template_grid();
    attention
        .iter()
        .map(|a| {
            let n = a.shape()[1];
            let d = a.data();
            let row: Vec<f64> = (0..nz)
                .map(|j| (0..t).map(|r| d[r * n + t + j]).sum::<f64>() / t as f64)
                .collect();
            bilinear_upscale(&row, g, cfg.template_res)
        })
        .collect()
}

pub fn write_attention_pgms(dir: &Path, attention: &[Tensor], cfg: &EncoderConfig) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let maps = tit_attention_maps(attention, cfg);
    for (l, m) in maps.iter().enumerate() {
        write_pgm(&dir.join(format!("attention_layer{l}.pgm")), cfg.template_res, cfg.template_res, m)?;
    }
    Ok(maps.len())
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Axes frame mapping data ranges onto an SVG viewport.
struct Chart {
    svg: String,
    x: (f64, f64),
    y: (f64, f64),
    ox: f64,
    oy: f64,
    w: f64,
    h: f64,
}

impl Chart {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) -> Self {
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
            W / 2.0,
            escape(title)
        );
        let (ox, oy, w, h) = (PAD, H - PAD, W - 1.5 * PAD, H - 2.0 * PAD);
        let _ = writeln!(
            svg,
            "<line x1=\"{ox}\" y1=\"{oy}\" x2=\"{}\" y2=\"{oy}\" stroke=\"black\"/><line x1=\"{ox}\" y1=\"{oy}\" x2=\"{ox}\" y2=\"{}\" stroke=\"black\"/>",
            ox + w,
            oy - h
        );
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", ox + w / 2.0, H - 10.0, escape(xlabel));
        let _ = writeln!(
            svg,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
            oy - h / 2.0,
            oy - h / 2.0,
            escape(ylabel)
        );
        let mut c = Self { svg, x, y, ox, oy, w, h };
        for k in 0..=4 {
            let fx = x.0 + (x.1 - x.0) * k as f64 / 4.0;
            let fy = y.0 + (y.1 - y.0) * k as f64 / 4.0;
            let (px, py) = (c.px(fx), c.py(fy));
            let _ = writeln!(c.svg, "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>", oy + 14.0, tick(fx));
            let _ = writeln!(c.svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", ox - 4.0, py + 4.0, tick(fy));
        }
        c
    }

    fn px(&self, v: f64) -> f64 {
        self.ox + (v - self.x.0) / (self.x.1 - self.x.0).max(1e-12) * self.w
    }

    fn py(&self, v: f64) -> f64 {
        self.oy - (v - self.y.0) / (self.y.1 - self.y.0).max(1e-12) * self.h
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str) {
        let p: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let _ = writeln!(self.svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", p.join(" "));
    }

    fn dot(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(self.svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.6\"/>", self.px(x), self.py(y));
    }

    fn bar(&mut self, x0: f64, x1: f64, y: f64, color: &str) {
        let (a, b) = (self.px(x0), self.px(x1));
        let top = self.py(y);
        let _ = writeln!(
            self.svg,
            "<rect class=\"bar\" x=\"{a:.2}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>",
            (b - a).max(0.0),
            (self.oy - top).max(0.0)
        );
    }

    fn legend(&mut self, k: usize, label: &str, color: &str) {
        let y = self.oy - self.h + 14.0 * k as f64;
        let x = self.ox + self.w - 150.0;
        let _ = writeln!(self.svg, "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", y - 9.0);
        let _ = writeln!(self.svg, "<text x=\"{}\" y=\"{y}\">{}</text>", x + 14.0, escape(label));
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round())
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write_svg(path: &Path, svg: String) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Four bar charts (l, t, r, b) of a distance distribution over bins `0..=n`; each must sum to 1.
pub fn distribution_svg(probs: &[f64], n: usize) -> Result<String> {
    let m = n + 1;
    if probs.len() != 4 * m {
        return Err(Error::Data(format!("expected {} probabilities, got {}", 4 * m, probs.len())));
    }
    for d in 0..4 {
        let s: f64 = probs[d * m..(d + 1) * m].iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("{} distribution sums to {s}", DIRECTIONS[d])));
        }
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        2.0 * W
    );
    for d in 0..4 {
        let mut c = Chart::new(DIRECTIONS[d], (0.0, m as f64), (0.0, 1.0), "distance (stride units)", "probability");
        for (i, p) in probs[d * m..(d + 1) * m].iter().enumerate() {
            c.bar(i as f64 + 0.1, i as f64 + 0.9, *p, COLORS[d]);
        }
        let inner = c.finish();
        let (dx, dy) = ((d % 2) as f64 * W, (d / 2) as f64 * H / 2.0);
        let _ = writeln!(svg, "<g transform=\"translate({dx} {dy}) scale(1 0.5)\">{inner}</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_distribution_svg(path: &Path, probs: &[f64], n: usize) -> Result<()> {
    write_svg(path, distribution_svg(probs, n)?)
}

/// Success rate against overlap threshold, one curve per label.
pub fn success_svg(thresholds: &[f64], curves: &[(String, Vec<f64>)]) -> String {
    let mut c = Chart::new("Success plot", (0.0, 1.0), (0.0, 1.0), "overlap threshold", "success rate");
    for (k, (label, ys)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64)> = thresholds.iter().cloned().zip(ys.iter().cloned()).collect();
        c.polyline(&pts, color);
        let auc = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
        c.legend(k, &format!("{label} [{auc:.3}]"), color);
    }
    c.finish()
}

pub fn histogram_svg(h: &TargetHistogram) -> String {
    let bins = h.counts[0].len();
    let xmax = bins as f64 * h.bin_width;
    let peak = h.counts.iter().flatten().cloned().max().unwrap_or(1).max(1) as f64;
    let title = format!(
        "Regression targets: {:.4}% in [0, {}]",
        100.0 * h.fraction_in_support(),
        h.support
    );
    let mut c = Chart::new(&title, (0.0, xmax), (0.0, peak), "target (stride units)", "count");
    let w = h.bin_width / 4.0;
    for d in 0..4 {
        for (b, &n) in h.counts[d].iter().enumerate() {
            let x0 = b as f64 * h.bin_width + d as f64 * w;
            c.bar(x0, x0 + w, n as f64, COLORS[d]);
        }
        c.legend(d, DIRECTIONS[d], COLORS[d]);
    }
    let x = c.px(h.support);
    let _ = writeln!(
        c.svg,
        "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>",
        c.oy,
        c.oy - c.h
    );
    c.finish()
}

/// Per-seed points and the mean curve of a metric against ρ.
pub fn sweep_svg(points: &[(f64, u64, f64)], ylabel: &str) -> String {
    let mut rhos: Vec<f64> = points.iter().map(|p| p.0).collect();
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let margin = ((hi - lo) * 0.1).max(0.01);
    let x0 = rhos.first().copied().unwrap_or(0.0);
    let x1 = rhos.last().copied().unwrap_or(1.0);
    let mut c = Chart::new(
        &format!("{ylabel} vs ratio"),
        (x0 - 0.05, x1 + 0.05),
        (lo - margin, hi + margin),
        "positive ratio",
        ylabel,
    );
    for p in points {
        c.dot(p.0, p.2, COLORS[0]);
    }
    let means: Vec<(f64, f64)> = rhos
        .iter()
        .map(|&r| {
            let v: Vec<f64> = points.iter().filter(|p| p.0 == r).map(|p| p.2).collect();
            (r, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    c.polyline(&means, COLORS[1]);
    c.legend(0, "per seed", COLORS[0]);
    c.legend(1, "mean", COLORS[1]);
    c.finish()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
