//! Minimal PNG line plots of value traces.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use viva_core::codec::{VALUE_MAX, VALUE_MIN};
use viva_core::episode::Episode;
use viva_core::sampler::TracePoint;

const WIDTH: usize = 480;
const HEIGHT: usize = 240;
const MARGIN: usize = 16;

const BACKGROUND: [u8; 3] = [255, 255, 255];
const FRAME: [u8; 3] = [120, 120, 120];
const GRID: [u8; 3] = [225, 225, 225];
const FAILURE_SHADE: [u8; 3] = [255, 226, 226];
const FAILURE_LINE: [u8; 3] = [200, 40, 40];
const GROUND_TRUTH: [u8; 3] = [150, 150, 150];

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [148, 103, 189],
    [140, 86, 75],
    [23, 190, 207],
];

pub fn color_hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            px: BACKGROUND.iter().copied().cycle().take(WIDTH * HEIGHT * 3).collect(),
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let i = (y as usize * WIDTH + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, x0: usize, x1: usize, y0: usize, y1: usize, c: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x as i64, y as i64, c);
            }
        }
    }

    /// Bresenham segment; `dash` skips every other 4-pixel run.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], thick: bool, dash: bool) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let mut n = 0u32;
        loop {
            if !dash || (n / 4) % 2 == 0 {
                self.set(x0, y0, c);
                if thick {
                    self.set(x0, y0 + 1, c);
                }
            }
            n += 1;
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Plots every model's trace for `episode` over the ground-truth return,
/// shading the steps from the injected failure onward.
pub fn plot_episode(path: &Path, episode: &Episode, traces: &[&[TracePoint]]) -> std::io::Result<()> {
    let mut canvas = Canvas::new();
    let (left, right) = (MARGIN, WIDTH - MARGIN);
    let (top, bottom) = (MARGIN, HEIGHT - MARGIN);
    let horizon = episode.horizon().max(1) as f64;
    let x_of = |t: usize| left as f64 + (right - left) as f64 * t as f64 / horizon;
    let y_of = |v: f64| {
        let v = v.clamp(VALUE_MIN, VALUE_MAX);
        bottom as f64 - (bottom - top) as f64 * (v - VALUE_MIN) / (VALUE_MAX - VALUE_MIN)
    };
    let point = |t: usize, v: f64| (x_of(t).round() as i64, y_of(v).round() as i64);

    if let Some(marker) = &episode.meta.failure {
        let x = x_of(marker.step).round() as usize;
        canvas.rect(x, right, top, bottom, FAILURE_SHADE);
    }
    for v in [0.5, 1.0, 1.5] {
        let y = y_of(v).round() as i64;
        canvas.line((left as i64, y), (right as i64, y), GRID, false, false);
    }
    if let Some(marker) = &episode.meta.failure {
        let x = x_of(marker.step).round() as i64;
        canvas.line((x, top as i64), (x, bottom as i64), FAILURE_LINE, false, true);
    }
    let truth: Vec<(i64, i64)> = (0..=episode.horizon())
        .filter_map(|t| episode.return_to_go(t).ok().map(|g| point(t, g)))
        .collect();
    for w in truth.windows(2) {
        canvas.line(w[0], w[1], GROUND_TRUTH, false, true);
    }
    for (k, trace) in traces.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = trace.iter().map(|p| point(p.t, p.v_hat)).collect();
        for w in pts.windows(2) {
            canvas.line(w[0], w[1], color, true, false);
        }
    }
    let (l, r, t, b) = (left as i64, right as i64, top as i64, bottom as i64);
    canvas.line((l, t), (r, t), FRAME, false, false);
    canvas.line((l, b), (r, b), FRAME, false, false);
    canvas.line((l, t), (l, b), FRAME, false, false);
    canvas.line((r, t), (r, b), FRAME, false, false);

    let mut encoder = png::Encoder::new(BufWriter::new(File::create(path)?), WIDTH as u32, HEIGHT as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&canvas.px)?;
    writer.finish()?;
    Ok(())
}
