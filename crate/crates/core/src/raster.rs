//! Minimal RGB canvas: panels, labels in a 3×5 bitmap font, polylines.

use crate::colorspace::PixelImage;

pub type Rgb = [f64; 3];

pub const WHITE: Rgb = [1.0, 1.0, 1.0];
pub const BLACK: Rgb = [0.0, 0.0, 0.0];
pub const GRAY: Rgb = [0.6, 0.6, 0.6];
pub const BLUE: Rgb = [0.12, 0.35, 0.75];
pub const ORANGE: Rgb = [0.9, 0.45, 0.1];

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

// Rows top to bottom, three bits per row (MSB = left column).
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 6],
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        ':' => [0, 2, 0, 2, 0],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        '=' => [0, 7, 0, 7, 0],
        '/' => [1, 1, 2, 4, 4],
        '_' => [0, 0, 0, 0, 7],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        '%' => [5, 1, 2, 4, 5],
        _ => [0, 0, 0, 0, 0],
    }
}

#[derive(Debug, Clone)]
pub struct Canvas {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&background);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: usize, h: usize, c: Rgb) {
        for dy in 0..h as i64 {
            for dx in 0..w as i64 {
                self.set(x + dx, y + dy, c);
            }
        }
    }

    pub fn blit(&mut self, img: &PixelImage, x: i64, y: i64) {
        for r in 0..img.height() {
            for c in 0..img.width() {
                self.set(x + c as i64, y + r as i64, img.get(r, c));
            }
        }
    }

    /// Width in pixels of `text` at the given scale.
    pub fn text_width(text: &str, scale: usize) -> usize {
        let n = text.chars().count();
        if n == 0 {
            0
        } else {
            (n * (GLYPH_W + 1) - 1) * scale
        }
    }

    pub fn text_height(scale: usize) -> usize {
        GLYPH_H * scale
    }

    pub fn draw_text(&mut self, x: i64, y: i64, text: &str, scale: usize, c: Rgb) {
        for (k, ch) in text.chars().enumerate() {
            let gx = x + (k * (GLYPH_W + 1) * scale) as i64;
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        self.fill_rect(gx + (col * scale) as i64, y + (row * scale) as i64, scale, scale, c);
                    }
                }
            }
        }
    }

    pub fn draw_line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb) {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.set(
                (x0 + (x1 - x0) * t).round() as i64,
                (y0 + (y1 - y0) * t).round() as i64,
                c,
            );
        }
    }

    pub fn into_image(self) -> PixelImage {
        PixelImage::new_clamped(self.height, self.width, self.data).expect("canvas values are finite")
    }
}

/// Lays panels out left to right, each with a caption above it.
pub fn labeled_row(panels: &[(String, &PixelImage)], scale: usize) -> PixelImage {
    let pad = 4;
    let label_h = Canvas::text_height(scale) + 2 * pad;
    let panel_w = panels
        .iter()
        .map(|(l, img)| img.width().max(Canvas::text_width(l, scale)))
        .max()
        .unwrap_or(0);
    let panel_h = panels.iter().map(|(_, img)| img.height()).max().unwrap_or(0);
    let width = panels.len() * (panel_w + pad) + pad;
    let mut canvas = Canvas::new(width, panel_h + label_h + pad, WHITE);
    for (i, (label, img)) in panels.iter().enumerate() {
        let x = (pad + i * (panel_w + pad)) as i64;
        let lx = x + (panel_w - Canvas::text_width(label, scale)) as i64 / 2;
        canvas.draw_text(lx, pad as i64, label, scale, BLACK);
        canvas.blit(img, x + (panel_w - img.width()) as i64 / 2, label_h as i64);
    }
    canvas.into_image()
}

/// Nearest-neighbour upscaling by an integer factor.
pub fn upscale(img: &PixelImage, k: usize) -> PixelImage {
    PixelImage::from_fn(img.height() * k, img.width() * k, |y, x| img.get(y / k, x / k))
        .expect("upscaled pixels stay in range")
}
