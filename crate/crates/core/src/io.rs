//! Artifact writers. Every file carries the configuration hash and seed in
//! its header: a leading JSON record, a `#` comment line, a PGM comment, or
//! PNG text chunks. Nothing time-dependent goes into these files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use crate::distill::RunRecord;
use crate::render::Canvas;
use crate::{Error, Result};

/// Identifies the configuration a file was produced from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    fn comment(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash, self.seed)
    }
}

fn json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Serde(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

/// One header record, one record per iteration, one summary record.
pub fn write_run_record<W: Write>(mut w: W, record: &RunRecord) -> Result<()> {
    json_line(&mut w, &json!({ "kind": "header", "header": record.header }))?;
    for it in &record.iterations {
        json_line(&mut w, &json!({ "kind": "iteration", "record": it }))?;
    }
    json_line(
        &mut w,
        &json!({
            "kind": "summary",
            "status": record.status,
            "final_metrics": record.final_metrics,
            "adapter_fingerprint": record.adapter_fingerprint,
            "final_particles": record.final_particles,
        }),
    )?;
    w.flush()?;
    Ok(())
}

pub fn save_run_record(path: &Path, record: &RunRecord) -> Result<()> {
    write_run_record(BufWriter::new(File::create(path)?), record)
}

/// Short human-readable account of a run.
pub fn run_summary(record: &RunRecord) -> String {
    let h = &record.header;
    let mut s = format!(
        "method: {}\nseed: {}\nconfig_hash: {}\niterations: {}\nstatus: {}\n",
        h.method.as_str(),
        h.seed,
        h.config_hash,
        record.iterations.len(),
        serde_json::to_string(&record.status).unwrap_or_default()
    );
    if let Some(m) = record.final_metrics {
        s += &format!("final_sliced_w1: {:.6}\nfinal_mmd_rbf: {:.6}\n", m.sliced_w1, m.mmd_rbf);
    }
    s
}

/// CSV with a leading `# config_hash=... seed=...` comment.
pub fn write_csv<W: Write>(mut w: W, stamp: &Stamp, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    writeln!(w, "# {}", stamp.comment())?;
    writeln!(w, "{}", columns.join(","))?;
    for r in rows {
        if r.len() != columns.len() {
            return Err(Error::Dimension {
                context: "csv row",
                expected: columns.len(),
                got: r.len(),
            });
        }
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Canvas values mapped linearly from `[lo, hi]` to `0..=255`, upscaled by
/// pixel replication; channel 0 only when the canvas is not 1 or 3 channels.
pub fn canvas_to_gray8(c: &Canvas, lo: f64, hi: f64, scale: usize) -> (usize, usize, Vec<u8>) {
    let (h, w, _) = c.shape();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(h * w * scale * scale);
    for i in 0..h * scale {
        for j in 0..w * scale {
            let v = (c.get(i / scale, j / scale, 0) - lo) / span;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (h * scale, w * scale, out)
}

/// `(min, max)` of the canvas, widened when constant.
pub fn value_range(c: &Canvas) -> (f64, f64) {
    let lo = c.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        (lo - 0.5, lo + 0.5)
    } else {
        (lo, hi)
    }
}

/// Binary PGM with the stamp as a comment line.
pub fn write_pgm(path: &Path, c: &Canvas, stamp: &Stamp, scale: usize) -> Result<()> {
    let (lo, hi) = value_range(c);
    let (h, w, px) = canvas_to_gray8(c, lo, hi, scale);
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n# {}\n# range={lo} {hi}\n{w} {h}\n255\n", stamp.comment())?;
    f.write_all(&px)?;
    f.flush()?;
    Ok(())
}

fn png_error(e: png::EncodingError) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// 8-bit PNG (grayscale or RGB) with the stamp in text chunks.
pub fn write_png_raw(path: &Path, width: usize, height: usize, rgb: bool, data: &[u8], stamp: &Stamp) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, width as u32, height as u32);
    enc.set_color(if rgb { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("config_hash".into(), stamp.config_hash.clone()).map_err(png_error)?;
    enc.add_text_chunk("seed".into(), stamp.seed.to_string()).map_err(png_error)?;
    let mut writer = enc.write_header().map_err(png_error)?;
    writer.write_image_data(data).map_err(png_error)?;
    writer.finish().map_err(png_error)?;
    Ok(())
}

pub fn write_canvas_png(path: &Path, c: &Canvas, stamp: &Stamp, scale: usize) -> Result<()> {
    let (lo, hi) = value_range(c);
    let (h, w, px) = canvas_to_gray8(c, lo, hi, scale);
    write_png_raw(path, w, h, false, &px, stamp)
}

/// A named polyline for [`plot_lines`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

struct Raster {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Raster {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            px: vec![255; w * h * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = 3 * (y as usize * self.w + x as usize);
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            for o in -1..=1 {
                self.set(x, y + o, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Line plot on a white canvas with axes and ticks; x may be drawn on a
/// log scale. Series colours follow their order; the legend is written as
/// a text chunk since the raster carries no glyphs.
pub fn plot_lines(path: &Path, series: &[Series], log_x: bool, stamp: &Stamp) -> Result<()> {
    const W: usize = 640;
    const H: usize = 400;
    const M: f64 = 40.0;
    let tx = |x: f64| if log_x { x.max(1e-300).ln() } else { x };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let map = |x: f64, y: f64| -> (i64, i64) {
        let px = M + (x - x0) / (x1 - x0) * (W as f64 - 2.0 * M);
        let py = H as f64 - M - (y - y0) / (y1 - y0) * (H as f64 - 2.0 * M);
        (px.round() as i64, py.round() as i64)
    };
    let mut r = Raster::new(W, H);
    let axis = [0, 0, 0];
    let (m, wi, hi) = (M as i64, W as i64, H as i64);
    r.line((m, hi - m), (wi - m, hi - m), axis);
    r.line((m, m), (m, hi - m), axis);
    for k in 0..=4 {
        let fx = m + k * (wi - 2 * m) / 4;
        let fy = hi - m - k * (hi - 2 * m) / 4;
        r.line((fx, hi - m), (fx, hi - m + 5), axis);
        r.line((m - 5, fy), (m, fy), axis);
    }
    let mut legend = Vec::new();
    for (si, s) in series.iter().enumerate() {
        let c = PALETTE[si % PALETTE.len()];
        legend.push(format!("{}=rgb({},{},{})", s.label, c[0], c[1], c[2]));
        let p: Vec<(i64, i64)> = s
            .points
            .iter()
            .map(|&(x, y)| (tx(x), y))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| map(x, y))
            .collect();
        for w in p.windows(2) {
            r.line(w[0], w[1], c);
        }
        for &(x, y) in &p {
            for dx in -3..=3 {
                for dy in -3..=3 {
                    r.set(x + dx, y + dy, c);
                }
            }
        }
    }
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, W as u32, H as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("config_hash".into(), stamp.config_hash.clone()).map_err(png_error)?;
    enc.add_text_chunk("seed".into(), stamp.seed.to_string()).map_err(png_error)?;
    enc.add_text_chunk("legend".into(), legend.join("; ")).map_err(png_error)?;
    enc.add_text_chunk(
        "axes".into(),
        format!("x=[{x0}, {x1}]{} y=[{y0}, {y1}]", if log_x { " (log)" } else { "" }),
    )
    .map_err(png_error)?;
    let mut writer = enc.write_header().map_err(png_error)?;
    writer.write_image_data(&r.px).map_err(png_error)?;
    writer.finish().map_err(png_error)?;
    Ok(())
}
