//! Rendering spectrograms into decorated plot images.
//!
//! The layout tiles the square canvas into a data viewport plus distractor
//! bands (title, axis labels, colorbar). Label "text" is drawn as
//! pseudo-glyphs: deterministic seven-segment-style stroke patterns with
//! text-like statistics but no font dependency — the analysis only needs
//! text-shaped distractors at known rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chirpgen::stft::Spectrogram;
use crate::chirpgen::types::{ChirpSpec, DecoratedImage, GenConfig, PlotGeometry, RenderConfig};
use crate::error::{Error, Result};
use crate::raster::{viridis, Canvas, Rect};

const INK: [u8; 3] = [0, 0, 0];
const PAPER: [u8; 3] = [255, 255, 255];

/// Computes the tiling layout for a config, without data extents.
/// Errors when the canvas is too small for the configured margins.
pub fn layout_rects(cfg: &RenderConfig) -> Result<[Rect; 6]> {
    let side = cfg.canvas;
    if !cfg.decor {
        let full = Rect::new(0, 0, side, side);
        let none = Rect::default();
        return Ok([full, none, none, none, none, none]);
    }
    let th = (side as f64 * cfg.title_frac).round() as usize;
    let lw = (side as f64 * cfg.left_frac).round() as usize;
    let bh = (side as f64 * cfg.bottom_frac).round() as usize;
    let rw = (side as f64 * cfg.right_frac).round() as usize;
    let mid_h = side.saturating_sub(th + bh);
    let data_w = side.saturating_sub(lw + rw);
    let grad_w = (rw as f64 * 0.7).round() as usize;
    let label_w = rw.saturating_sub(grad_w);
    if th < 4 || lw < 4 || bh < 4 || rw < 4 || mid_h < 8 || data_w < 8 || grad_w < 2 || label_w < 2
    {
        return Err(Error::invalid(format!(
            "canvas {side} too small for margins (title {th}, left {lw}, bottom {bh}, right {rw})"
        )));
    }
    let data = Rect::new(lw, th, data_w, mid_h);
    let title = Rect::new(0, 0, side, th);
    let xlabel = Rect::new(0, side - bh, side, bh);
    let ylabel = Rect::new(0, th, lw, mid_h);
    let colorbar = Rect::new(side - rw, th, grad_w, mid_h);
    let colorbar_label = Rect::new(side - rw + grad_w, th, label_w, mid_h);
    Ok([data, title, xlabel, ylabel, colorbar, colorbar_label])
}

/// Renders a magnitude grid into a decorated plot image. The returned
/// geometry is exactly what was drawn; `spec` supplies the embedded
/// ground truth (and the glyph-pattern seed).
pub fn render(grid: &Spectrogram, gen: &GenConfig, spec: &ChirpSpec) -> Result<DecoratedImage> {
    if grid.frames == 0 || grid.bins == 0 {
        return Err(Error::invalid("render: empty grid"));
    }
    let cfg = &gen.render;
    let [data, title, xlabel, ylabel, colorbar, colorbar_label] = layout_rects(cfg)?;
    let side = cfg.canvas;

    // Data extents: x spans frame centers, y spans 0..Nyquist.
    let frame_center = |f: usize| (f as f64 * gen.hop as f64 + gen.window as f64 / 2.0) / gen.fs;
    let geometry = PlotGeometry {
        canvas_w: side,
        canvas_h: side,
        data_rect: data,
        title_rect: title,
        xlabel_rect: xlabel,
        ylabel_rect: ylabel,
        colorbar_rect: colorbar,
        colorbar_label_rect: colorbar_label,
        time_extent: (frame_center(0), frame_center(grid.frames - 1)),
        freq_extent: (0.0, gen.fs / 2.0),
    };
    geometry.validate()?;

    let mut canvas = Canvas::new(side, side, PAPER);
    fill_data(&mut canvas, &data, grid, cfg.dynamic_range_db);

    if cfg.decor {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9059_7a2e_11d0_c0de);
        draw_title(&mut canvas, &title, &mut rng);
        draw_xlabel(&mut canvas, &xlabel, &data, &mut rng);
        draw_ylabel(&mut canvas, &ylabel, &data, &mut rng);
        draw_colorbar(&mut canvas, &colorbar);
        draw_colorbar_label(&mut canvas, &colorbar_label, &mut rng);
    }

    Ok(DecoratedImage {
        pixels: canvas,
        geometry,
        label: gen.ranges.normalize(spec),
        spec: spec.clone(),
    })
}

/// Log-magnitude colormap fill of the data viewport. Time runs left→right
/// across frames; frequency runs bottom→top across bins. Nearest-neighbor
/// sampling keeps the mapping exact and cheap.
fn fill_data(canvas: &mut Canvas, rect: &Rect, grid: &Spectrogram, dynamic_range_db: f64) {
    let max = grid.max_value();
    if max <= 0.0 {
        // Degenerate all-zero grid: render the floor color everywhere.
        canvas.fill_rect(rect, viridis(0.0));
        return;
    }
    let vmax = 20.0 * max.log10();
    let floor = vmax - dynamic_range_db;
    for py in 0..rect.h {
        // top row = highest bin
        let bin = ((rect.h - 1 - py) * grid.bins) / rect.h;
        for px in 0..rect.w {
            let frame = (px * grid.frames) / rect.w;
            let mag = grid.at(frame.min(grid.frames - 1), bin.min(grid.bins - 1));
            let v = 20.0 * (mag + 1e-12).log10();
            let t = ((v - floor) / dynamic_range_db).clamp(0.0, 1.0);
            canvas.put(rect.x + px, rect.y + py, viridis(t));
        }
    }
}

/// Writes a pixel only when it falls inside `rect` — every distractor stroke
/// goes through this, which is what keeps decorations inside their bands.
fn put_clipped(canvas: &mut Canvas, rect: &Rect, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && rect.contains(x as usize, y as usize) {
        canvas.put(x as usize, y as usize, rgb);
    }
}

/// One pseudo-glyph: a seven-segment-style cell at (x, y) with the segment
/// set chosen by `bits`. Strokes are clipped to `rect`.
fn draw_glyph(canvas: &mut Canvas, rect: &Rect, x: i64, y: i64, w: i64, h: i64, bits: u8) {
    // Guarantee at least two segments so every glyph leaves visible ink.
    let bits = bits | 0b0100_0010;
    let mid = y + h / 2;
    let seg_h: [(i64, bool); 3] = [(y, bits & 1 != 0), (mid, bits & 2 != 0), (y + h - 1, bits & 4 != 0)];
    for (sy, on) in seg_h {
        if on {
            for sx in x..x + w {
                put_clipped(canvas, rect, sx, sy, INK);
            }
        }
    }
    let seg_v: [(i64, i64, i64, bool); 4] = [
        (x, y, mid, bits & 8 != 0),
        (x, mid, y + h, bits & 16 != 0),
        (x + w - 1, y, mid, bits & 32 != 0),
        (x + w - 1, mid, y + h, bits & 64 != 0),
    ];
    for (sx, y0, y1, on) in seg_v {
        if on {
            for sy in y0..y1 {
                put_clipped(canvas, rect, sx, sy, INK);
            }
        }
    }
}

/// A horizontal run of `count` glyphs starting at (x, y).
fn draw_text_run(
    canvas: &mut Canvas,
    rect: &Rect,
    x: i64,
    y: i64,
    count: usize,
    gw: i64,
    gh: i64,
    rng: &mut ChaCha8Rng,
) {
    for i in 0..count {
        let bits: u8 = rng.gen();
        draw_glyph(canvas, rect, x + i as i64 * (gw + 2), y, gw, gh, bits);
    }
}

fn draw_title(canvas: &mut Canvas, rect: &Rect, rng: &mut ChaCha8Rng) {
    let count = 8 + (rng.gen::<u8>() % 5) as usize;
    let gw = 5i64;
    let gh = (rect.h as i64 - 6).clamp(5, 12);
    let pitch = gw + 2;
    let x0 = rect.x as i64 + (rect.w as i64 - count as i64 * pitch) / 2;
    let y0 = rect.y as i64 + (rect.h as i64 - gh) / 2;
    draw_text_run(canvas, rect, x0, y0, count, gw, gh, rng);
}

fn draw_xlabel(canvas: &mut Canvas, rect: &Rect, data: &Rect, rng: &mut ChaCha8Rng) {
    // Bottom spine along the top edge of the band, under the data viewport.
    for x in data.x..data.right() {
        put_clipped(canvas, rect, x as i64, rect.y as i64, INK);
    }
    // Five ticks with numeric-looking 3-glyph groups beneath.
    for i in 0..5 {
        let tx = data.x as i64 + (i * (data.w - 1) as i64) / 4;
        for dy in 0..3 {
            put_clipped(canvas, rect, tx, rect.y as i64 + dy, INK);
        }
        draw_text_run(canvas, rect, tx - 5, rect.y as i64 + 5, 3, 3, 5, rng);
    }
    // Axis-label run centered lower in the band.
    let count = 6;
    let x0 = data.x as i64 + (data.w as i64 - count as i64 * 5) / 2;
    draw_text_run(canvas, rect, x0, rect.y as i64 + 13, count, 3, 5, rng);
}

fn draw_ylabel(canvas: &mut Canvas, rect: &Rect, data: &Rect, rng: &mut ChaCha8Rng) {
    // Left spine along the right edge of the band.
    let spine_x = rect.right() as i64 - 1;
    for y in data.y..data.bottom() {
        put_clipped(canvas, rect, spine_x, y as i64, INK);
    }
    // Five ticks with glyph groups to their left.
    for i in 0..5 {
        let ty = data.y as i64 + (i * (data.h - 1) as i64) / 4;
        for dx in 0..3 {
            put_clipped(canvas, rect, spine_x - dx, ty, INK);
        }
        draw_text_run(canvas, rect, spine_x - 16, ty - 2, 3, 3, 5, rng);
    }
    // Vertical axis-label glyph stack near the left edge.
    let n = 4usize;
    let y0 = data.y as i64 + (data.h as i64 - n as i64 * 8) / 2;
    for i in 0..n {
        let bits: u8 = rng.gen();
        draw_glyph(canvas, rect, rect.x as i64 + 2, y0 + i as i64 * 8, 3, 6, bits);
    }
}

/// Vertical colormap gradient: top = 1.0, bottom = 0.0.
fn draw_colorbar(canvas: &mut Canvas, rect: &Rect) {
    for py in 0..rect.h {
        let t = 1.0 - py as f64 / (rect.h - 1).max(1) as f64;
        let rgb = viridis(t);
        for px in 0..rect.w {
            canvas.put(rect.x + px, rect.y + py, rgb);
        }
    }
}

fn draw_colorbar_label(canvas: &mut Canvas, rect: &Rect, rng: &mut ChaCha8Rng) {
    // Short glyph stack beside the gradient, like colorbar tick labels.
    for i in 0..5 {
        let ty = rect.y as i64 + (i * (rect.h - 6) as i64) / 4;
        let bits: u8 = rng.gen();
        draw_glyph(canvas, rect, rect.x as i64 + 1, ty, 3, 5, bits);
    }
}
