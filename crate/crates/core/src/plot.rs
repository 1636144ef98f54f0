//! PNG output: grayscale previews and NEX line plots drawn with a small
//! built-in rasteriser and a 5×7 bitmap font.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::slice::RealSlice;

type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const BLACK: Rgb = [0, 0, 0];
const GRID: Rgb = [225, 225, 225];
const PALETTE: [Rgb; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(data).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// 8-bit grayscale PNG; `lo` maps to black, `hi` to white. Non-finite pixels are black.
pub fn write_grayscale_png(path: &Path, slice: &RealSlice, lo: f64, hi: f64) -> Result<()> {
    ensure!(hi > lo, Config, "grayscale window needs hi > lo, got [{lo}, {hi}]");
    let data: Vec<u8> = slice
        .data()
        .iter()
        .map(|v| if v.is_finite() { (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8 } else { 0 })
        .collect();
    write_png(path, slice.width(), slice.height(), png::ColorType::Grayscale, &data)
}

/// Window from 0 to the largest finite value (1 when there is none).
pub fn auto_window(slice: &RealSlice) -> (f64, f64) {
    let hi = slice.data().iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    (0.0, if hi > 0.0 { hi } else { 1.0 })
}

#[rustfmt::skip]
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '>' => [0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08],
        '<' => [0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

const CHAR_W: i64 = 6;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, px: WHITE.iter().copied().cycle().take(w * h * 3).collect() }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, c);
            }
        }
    }

    /// Bresenham line, `thick` pixels wide (square pen).
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb, thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let lo = -(thick - 1) / 2;
        loop {
            self.rect(x + lo, y + lo, x + lo + thick - 1, y + lo + thick - 1, c);
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

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.put(x + i as i64 * CHAR_W + col, y + row as i64, c);
                    }
                }
            }
        }
    }

    /// Text rotated 90° counter-clockwise, reading bottom to top from `(x, y)`.
    fn text_up(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.put(x + row as i64, y - i as i64 * CHAR_W - col, c);
                    }
                }
            }
        }
    }
}

fn text_width(s: &str) -> i64 {
    s.chars().count() as i64 * CHAR_W - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalLine {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub lines: Vec<HorizontalLine>,
}

fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10()).ceil() as usize };
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        format!("{:.decimals$}", 0.0)
    } else {
        s
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        let pad = (hi.abs() * 0.05).max(0.5);
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl LinePlot {
    /// RGB raster (row-major, 3 bytes per pixel).
    pub fn render(&self, width: usize, height: usize) -> Result<Vec<u8>> {
        ensure!(width >= 200 && height >= 150, Config, "plot canvas {width}x{height} is too small");
        ensure!(self.series.iter().any(|s| !s.points.is_empty()), Format, "plot has no data points");
        let (left, right, top, bottom) = (70i64, width as i64 - 20, 30i64, height as i64 - 45);
        let (x_lo, x_hi) = padded_range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y_lo, y_hi) = padded_range(
            self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain(self.lines.iter().map(|l| l.value)),
        );
        let px = |x: f64| left + ((x - x_lo) / (x_hi - x_lo) * (right - left) as f64).round() as i64;
        let py = |y: f64| bottom - ((y - y_lo) / (y_hi - y_lo) * (bottom - top) as f64).round() as i64;
        let mut cv = Canvas::new(width, height);

        let y_step = nice_step(y_hi - y_lo, 6);
        let mut t = (y_lo / y_step).ceil() * y_step;
        while t <= y_hi {
            let y = py(t);
            cv.line((left, y), (right, y), GRID, 1);
            cv.line((left - 4, y), (left, y), BLACK, 1);
            let s = tick_label(t, y_step);
            cv.text(left - 8 - text_width(&s), y - 3, &s, BLACK);
            t += y_step;
        }
        let x_step = nice_step(x_hi - x_lo, 8).max(if x_hi - x_lo >= 2.0 { 1.0 } else { 0.0 });
        let mut t = (x_lo / x_step).ceil() * x_step;
        while t <= x_hi {
            let x = px(t);
            cv.line((x, top), (x, bottom), GRID, 1);
            cv.line((x, bottom), (x, bottom + 4), BLACK, 1);
            let s = tick_label(t, x_step);
            cv.text(x - text_width(&s) / 2, bottom + 8, &s, BLACK);
            t += x_step;
        }
        cv.line((left, top), (left, bottom), BLACK, 1);
        cv.line((left, bottom), (right, bottom), BLACK, 1);
        cv.text((left + right) / 2 - text_width(&self.x_label) / 2, bottom + 24, &self.x_label, BLACK);
        cv.text_up(8, (top + bottom) / 2 + text_width(&self.y_label) / 2, &self.y_label, BLACK);
        cv.text((width as i64 - text_width(&self.title)) / 2, 10, &self.title, BLACK);

        let n_series = self.series.len();
        for (i, l) in self.lines.iter().enumerate() {
            if !l.value.is_finite() {
                continue;
            }
            let c = PALETTE[(n_series + i) % PALETTE.len()];
            let y = py(l.value);
            let mut x = left;
            while x < right {
                cv.line((x, y), ((x + 8).min(right), y), c, 2);
                x += 14;
            }
        }
        for (i, s) in self.series.iter().enumerate() {
            let c = PALETTE[i % PALETTE.len()];
            let pts: Vec<Option<(i64, i64)>> =
                s.points.iter().map(|&(x, y)| (x.is_finite() && y.is_finite()).then(|| (px(x), py(y)))).collect();
            for w in pts.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    cv.line(a, b, c, 2);
                }
            }
            for (x, y) in pts.into_iter().flatten() {
                cv.rect(x - 2, y - 2, x + 2, y + 2, c);
            }
        }

        let labels: Vec<(&str, Rgb)> = self
            .series
            .iter()
            .enumerate()
            .map(|(i, s)| (s.label.as_str(), PALETTE[i % PALETTE.len()]))
            .chain(self.lines.iter().enumerate().map(|(i, l)| (l.label.as_str(), PALETTE[(n_series + i) % PALETTE.len()])))
            .collect();
        let legend_w = labels.iter().map(|(s, _)| text_width(s)).max().unwrap_or(0) + 24;
        let (lx, mut ly) = (right - legend_w - 6, top + 6);
        for (s, c) in labels {
            cv.rect(lx, ly + 1, lx + 12, ly + 5, c);
            cv.text(lx + 18, ly, s, BLACK);
            ly += 12;
        }
        Ok(cv.px)
    }

    pub fn save_png(&self, path: &Path, width: usize, height: usize) -> Result<()> {
        let px = self.render(width, height)?;
        write_png(path, width, height, png::ColorType::Rgb, &px)
    }
}

/// Reads a `nex,value` curve CSV.
pub fn read_curve_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::calibration::csv_error(path, e))?;
    let headers = r.headers().map_err(|e| crate::calibration::csv_error(path, e))?.clone();
    ensure!(
        headers.len() == 2 && &headers[0] == "nex" && &headers[1] == "value",
        Format,
        "{}: expected header nex,value, got {:?}",
        path.display(),
        headers.iter().collect::<Vec<_>>()
    );
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| crate::calibration::csv_error(path, e))?;
        let parse = |j: usize| {
            rec[j].trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: row {} column {} is not a number: {:?}", path.display(), i + 2, j + 1, &rec[j]))
            })
        };
        let x = parse(0)?;
        ensure!(x.is_finite(), Format, "{}: row {} has a non-finite NEX", path.display(), i + 2);
        points.push((x, parse(1)?));
    }
    ensure!(!points.is_empty(), Format, "{}: empty curve", path.display());
    Ok(points)
}

/// Line plot of NEX curves with optional horizontal reference lines
/// (the denoised NEX=1 values). Labels default to the CSV file stems.
pub fn export_plot(
    curves: &[(&str, &Path)],
    lines: &[HorizontalLine],
    title: &str,
    y_label: &str,
    out: &Path,
) -> Result<()> {
    ensure!(!curves.is_empty(), Config, "no curves to plot");
    let series = curves
        .iter()
        .map(|(label, path)| Ok(Series { label: label.to_string(), points: read_curve_csv(path)? }))
        .collect::<Result<Vec<_>>>()?;
    let plot = LinePlot { title: title.into(), x_label: "NEX".into(), y_label: y_label.into(), series, lines: lines.to_vec() };
    plot.save_png(out, 640, 420)
}
