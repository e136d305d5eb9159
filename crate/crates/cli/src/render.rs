//! Overlay rendering: predicted points as red plus markers and the count as
//! yellow digits, drawn onto the input image. Output is deterministic for
//! fixed inputs.

use std::path::Path;

use anyhow::{Context, Result};
use crowdpoint::checkpoint;
use crowdpoint::decoder::PredPoint;
use crowdpoint::model::infer_image;
use image::{Rgb, RgbImage};
use ndarray::Array3;

pub const MARKER: Rgb<u8> = Rgb([255, 0, 0]);
pub const TEXT: Rgb<u8> = Rgb([255, 220, 0]);

/// 3x5 digit glyphs, row-major bits.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111], // 0
    [0b010, 0b110, 0b010, 0b010, 0b111], // 1
    [0b111, 0b001, 0b111, 0b100, 0b111], // 2
    [0b111, 0b001, 0b111, 0b001, 0b111], // 3
    [0b101, 0b101, 0b111, 0b001, 0b001], // 4
    [0b111, 0b100, 0b111, 0b001, 0b111], // 5
    [0b111, 0b100, 0b111, 0b101, 0b111], // 6
    [0b111, 0b001, 0b010, 0b010, 0b010], // 7
    [0b111, 0b101, 0b111, 0b101, 0b111], // 8
    [0b111, 0b101, 0b111, 0b001, 0b111], // 9
];

fn to_rgb_image(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    out
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_marker(img: &mut RgbImage, x: f64, y: f64) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for d in -2i64..=2 {
        put(img, cx + d, cy, MARKER);
        put(img, cx, cy + d, MARKER);
    }
}

fn draw_count(img: &mut RgbImage, count: usize) {
    let text = count.to_string();
    let scale = 2i64;
    let mut x0 = 2i64;
    for ch in text.chars() {
        let glyph = DIGITS[ch.to_digit(10).unwrap() as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(
                                img,
                                x0 + col as i64 * scale + dx,
                                2 + row as i64 * scale + dy,
                                TEXT,
                            );
                        }
                    }
                }
            }
        }
        x0 += 4 * scale;
    }
}

/// Compose a prediction overlay for an image.
pub fn draw_overlay(image: &Array3<f32>, points: &[PredPoint]) -> RgbImage {
    let mut img = to_rgb_image(image);
    for p in points {
        draw_marker(&mut img, p.x, p.y);
    }
    draw_count(&mut img, points.len());
    img
}

/// Run inference and write the overlay PNG. Returns the predicted count.
pub fn render(ckpt_path: &Path, image_path: &Path, out_path: &Path, tau: f64) -> Result<usize> {
    let ckpt = checkpoint::load::<f32>(ckpt_path)?;
    let (model, mut store) = checkpoint::restore_model(&ckpt)?;
    let image = crate::ops::load_rgb(image_path)?;
    let points = infer_image(&model, &mut store, &image, tau)?;
    let overlay = draw_overlay(&image, &points);
    overlay
        .save(out_path)
        .with_context(|| format!("writing overlay to {}", out_path.display()))?;
    Ok(points.len())
}

/// Count distinct plus-marker centers in an overlay (test support): a
/// center pixel has the marker color along both 5-pixel arms.
pub fn count_markers(img: &RgbImage) -> usize {
    let mut count = 0usize;
    for y in 0..img.height() as i64 {
        for x in 0..img.width() as i64 {
            let arm = |dx: i64, dy: i64| {
                let (px, py) = (x + dx, y + dy);
                px >= 0
                    && py >= 0
                    && (px as u32) < img.width()
                    && (py as u32) < img.height()
                    && *img.get_pixel(px as u32, py as u32) == MARKER
            };
            let full = (-2i64..=2).all(|d| arm(d, 0)) && (-2i64..=2).all(|d| arm(0, d));
            // Reject pixels that are interior to a longer horizontal or
            // vertical run (only true centers have exactly 5-pixel arms).
            if full && !arm(-3, 0) && !arm(3, 0) && !arm(0, -3) && !arm(0, 3) {
                count += 1;
            }
        }
    }
    count
}
