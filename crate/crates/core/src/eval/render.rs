//! Annotated previews: tone-mapped frame, ground truth in green, detections
//! in red with their confidence printed above the box.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::detector::infer::median_mad;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Detection};
use crate::raster::Gray16;

pub const GT_COLOR: [u8; 3] = [0, 220, 0];
pub const DET_COLOR: [u8; 3] = [255, 40, 40];

/// 3x5 glyphs for `0-9` and `.`, one row per entry, MSB on the left.
const GLYPHS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b001, 0b001, 0b001],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
    [0b000, 0b000, 0b000, 0b000, 0b010],
];

/// asinh stretch around the median, in units of the robust noise.
pub fn tone_map(frame: &Gray16) -> RgbImage {
    let vals: Vec<f64> = frame.data.iter().map(|&v| v as f64).collect();
    let (med, mad) = median_mad(&vals);
    let sigma = (1.4826 * mad).max(1.0);
    let stretch = |v: f64| ((v - med) / sigma).max(-2.0).asinh();
    let top = vals.iter().copied().fold(med, f64::max);
    let (lo, hi) = (
        stretch(med - 2.0 * sigma),
        stretch(top).max(stretch(med) + 1.0),
    );
    let mut img = RgbImage::new(frame.width as u32, frame.height as u32);
    for (p, &v) in img.pixels_mut().zip(&vals) {
        let g = ((stretch(v) - lo) / (hi - lo) * 255.0)
            .round()
            .clamp(0.0, 255.0) as u8;
        *p = Rgb([g, g, g]);
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// One-pixel outline on the pixels the box covers.
pub fn draw_box(img: &mut RgbImage, b: &BoundingBox, c: [u8; 3]) {
    let x0 = b.x_min.floor() as i64;
    let y0 = b.y_min.floor() as i64;
    let x1 = (b.x_max.ceil() as i64 - 1).max(x0);
    let y1 = (b.y_max.ceil() as i64 - 1).max(y0);
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

/// Digits and dots only; other characters advance without drawing.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, c: [u8; 3]) {
    for (k, ch) in text.chars().enumerate() {
        let g = match ch {
            '0'..='9' => GLYPHS[ch as usize - '0' as usize],
            '.' => GLYPHS[10],
            _ => continue,
        };
        let ox = x + 4 * k as i64;
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, ox + col, y + row as i64, c);
                }
            }
        }
    }
}

pub fn render_annotated(frame: &Gray16, detections: &[Detection], gts: &[BoundingBox]) -> RgbImage {
    let mut img = tone_map(frame);
    for g in gts {
        draw_box(&mut img, g, GT_COLOR);
    }
    for d in detections {
        draw_box(&mut img, &d.bbox, DET_COLOR);
        let label = format!("{:.2}", d.confidence);
        let ty = if d.bbox.y_min >= 7.0 {
            d.bbox.y_min.floor() as i64 - 6
        } else {
            d.bbox.y_max.ceil() as i64 + 1
        };
        draw_text(&mut img, d.bbox.x_min.floor() as i64, ty, &label, DET_COLOR);
    }
    img
}

pub fn save_annotated(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> Gray16 {
        let data = (0..40 * 30).map(|i| 100 + (i * 7 % 13) as u16).collect();
        Gray16::new(40, 30, data).unwrap()
    }

    #[test]
    fn no_annotations_is_tone_map() {
        let f = frame();
        let img = render_annotated(&f, &[], &[]);
        assert_eq!(img, tone_map(&f));
        assert_eq!((img.width(), img.height()), (40, 30));
    }

    #[test]
    fn box_edges_drawn() {
        let f = frame();
        let b = BoundingBox::new(5.0, 12.0, 15.0, 20.0).unwrap();
        let img = render_annotated(&f, &[], &[b]);
        for (x, y) in [
            (5, 12),
            (14, 12),
            (5, 19),
            (14, 19),
            (10, 12),
            (10, 19),
            (5, 16),
            (14, 16),
        ] {
            assert_eq!(img.get_pixel(x, y).0, GT_COLOR, "({x}, {y})");
        }
        assert_ne!(img.get_pixel(10, 16).0, GT_COLOR);
    }
}
