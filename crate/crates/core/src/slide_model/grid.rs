//! Coordinate-grid and region-boundary overlays drawn with a 5×7 bitmap font.

use image::{Rgb, RgbImage};

use super::PixelRect;

/// Color of grid lines, boundaries and labels.
pub const OVERLAY_COLOR: Rgb<u8> = Rgb([0, 0, 0]);

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// Rows of a 5×7 glyph, most significant of the low 5 bits is the left column.
fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c {
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
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        _ => return None,
    })
}

/// Pixel footprint of `text` at `scale`.
pub fn text_size(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().count() as u32;
    if n == 0 {
        return (0, 0);
    }
    ((n * (GLYPH_W + 1) - 1) * scale, GLYPH_H * scale)
}

/// Draws `text` with its top-left corner at `(x, y)`, clipping at the edges.
/// Unsupported characters leave a blank cell.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for (ci, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x + ci as u32 * (GLYPH_W + 1) * scale;
        for (ry, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let px = gx + col * scale + dx;
                        let py = y + ry as u32 * scale + dy;
                        if px < w && py < h {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

/// Line width for an image side: `max(1, round(dim / 500))`.
pub fn line_width(dim: u32) -> u32 {
    ((dim as f64 / 500.0).round() as u32).max(1)
}

/// Pixel positions of grid lines along an axis of length `dim`: every multiple
/// of `interval` plus the far edge at `dim - 1`.
pub fn grid_positions(dim: u32, interval: f64) -> Vec<u32> {
    assert!(dim > 0);
    let mut out = Vec::new();
    let mut k = 0u32;
    loop {
        let t = k as f64 * interval;
        if t > 1.0 + 1e-9 {
            break;
        }
        let p = (t * dim as f64).round() as u32;
        out.push(p.min(dim - 1));
        k += 1;
    }
    out.push(dim - 1);
    out.dedup();
    out
}

/// Label for the `k`-th grid line, trimmed to at most three decimals.
fn grid_label(value: f64) -> String {
    let s = format!("{value:.3}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    let (iw, ih) = img.dimensions();
    for py in y..(y + h).min(ih) {
        for px in x..(x + w).min(iw) {
            img.put_pixel(px, py, color);
        }
    }
}

/// Copy of `image` with grid lines every `interval` (relative units) on both
/// axes and tick labels along the top and left edges.
pub fn annotate_grid(image: &RgbImage, interval: f64) -> RgbImage {
    assert!(interval > 0.0 && interval < 1.0, "grid interval must be in (0, 1)");
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    if w == 0 || h == 0 {
        return out;
    }
    let lw = line_width(w.max(h));
    let scale = lw;
    let xs = grid_positions(w, interval);
    let ys = grid_positions(h, interval);
    for &x in &xs {
        let x0 = x.min(w.saturating_sub(lw));
        fill_rect(&mut out, x0, 0, lw, h, OVERLAY_COLOR);
    }
    for &y in &ys {
        let y0 = y.min(h.saturating_sub(lw));
        fill_rect(&mut out, 0, y0, w, lw, OVERLAY_COLOR);
    }
    let pad = lw + scale;
    let n = (1.0 / interval + 1e-9).floor() as u32;
    for k in 1..=n {
        let t = k as f64 * interval;
        if t >= 1.0 - 1e-9 {
            break;
        }
        let label = grid_label(t);
        let (tw, th) = text_size(&label, scale);
        let x = (t * w as f64).round() as u32 + pad;
        if x + tw < w && pad + th < h {
            draw_text(&mut out, x, pad, &label, scale, OVERLAY_COLOR);
        }
        let y = (t * h as f64).round() as u32 + pad;
        if y + th < h && pad + tw < w {
            draw_text(&mut out, pad, y, &label, scale, OVERLAY_COLOR);
        }
    }
    out
}

/// Outlines `rect` (already in image coordinates) and writes `label` inside
/// its top-left corner.
pub fn draw_labeled_box(img: &mut RgbImage, rect: PixelRect, label: &str) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 || rect.w == 0 || rect.h == 0 {
        return;
    }
    let lw = line_width(w.max(h));
    let x1 = (rect.x + rect.w).min(w);
    let y1 = (rect.y + rect.h).min(h);
    let bw = x1.saturating_sub(rect.x);
    let bh = y1.saturating_sub(rect.y);
    fill_rect(img, rect.x, rect.y, bw, lw, OVERLAY_COLOR);
    fill_rect(img, rect.x, y1.saturating_sub(lw), bw, lw, OVERLAY_COLOR);
    fill_rect(img, rect.x, rect.y, lw, bh, OVERLAY_COLOR);
    fill_rect(img, x1.saturating_sub(lw), rect.y, lw, bh, OVERLAY_COLOR);
    let scale = (lw * 2).max(1);
    draw_text(img, rect.x + 2 * lw, rect.y + 2 * lw, label, scale, OVERLAY_COLOR);
}
