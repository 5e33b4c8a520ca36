//! Side-by-side prediction/ground-truth rendering: two copies of the input
//! separated by a 4-px gutter, boxes as 1-px max-intensity rectangles, and
//! scores printed above predicted boxes with a tiny 3x5 digit font.

use crate::geometry::{Annotation, BBox, Detection};
use crate::image::GrayImage;

pub const GUTTER_PX: usize = 4;
const INK: u8 = 255;

/// Left panel: detections with score labels. Right panel: ground truth.
pub fn overlay(
    image: &GrayImage,
    detections: &[Detection],
    ground_truth: &[Annotation],
) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let mut left = image.clone();
    for det in detections {
        draw_rect(&mut left, &det.bbox);
        draw_score(&mut left, &det.bbox, det.score);
    }
    let mut right = image.clone();
    for gt in ground_truth {
        draw_rect(&mut right, &gt.bbox);
    }
    let mut out = GrayImage::new(2 * w + GUTTER_PX, h, 0).expect("panel size is positive");
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, left.get(x, y));
            out.set(w + GUTTER_PX + x, y, right.get(x, y));
        }
    }
    out
}

/// 1-px rectangle outline, clipped to the image.
pub fn draw_rect(image: &mut GrayImage, bbox: &BBox) {
    let (w, h) = (image.width() as f32, image.height() as f32);
    let b = bbox.clip(w, h);
    if b.w <= 0.0 || b.h <= 0.0 {
        return;
    }
    let x0 = b.x.floor() as usize;
    let y0 = b.y.floor() as usize;
    let x1 = (b.x_max().ceil() as usize).clamp(x0 + 1, image.width()) - 1;
    let y1 = (b.y_max().ceil() as usize).clamp(y0 + 1, image.height()) - 1;
    for x in x0..=x1 {
        image.set(x, y0, INK);
        image.set(x, y1, INK);
    }
    for y in y0..=y1 {
        image.set(x0, y, INK);
        image.set(x1, y, INK);
    }
}

// Rows of each 3-wide glyph, most significant bit left.
const GLYPHS: [(char, [u8; 5]); 11] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b001, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
];

fn glyph(c: char) -> Option<&'static [u8; 5]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

/// Score to two decimals, drawn just above the box (inside it when the box
/// touches the top edge).
fn draw_score(image: &mut GrayImage, bbox: &BBox, score: f32) {
    let text = format!("{score:.2}");
    let x0 = bbox.x.max(0.0) as isize;
    let above = bbox.y as isize - 7;
    let y0 = if above < 0 { bbox.y as isize + 2 } else { above };
    draw_text(image, x0, y0, &text);
}

pub fn draw_text(image: &mut GrayImage, x0: isize, y0: isize, text: &str) {
    let mut x = x0;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) != 0 {
                        let (px, py) = (x + dx as isize, y0 + dy as isize);
                        if px >= 0
                            && py >= 0
                            && (px as usize) < image.width()
                            && (py as usize) < image.height()
                        {
                            image.set(px as usize, py as usize, INK);
                        }
                    }
                }
            }
        }
        x += 4;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(side: usize) -> GrayImage {
        GrayImage::new(side, side, 90).unwrap()
    }

    #[test]
    fn empty_detections_leave_left_panel_untouched() {
        let img = flat(32);
        let gt = [Annotation {
            class_id: 0,
            bbox: BBox::new(4.0, 4.0, 10.0, 8.0),
        }];
        let out = overlay(&img, &[], &gt);
        assert_eq!(out.width(), 2 * 32 + GUTTER_PX);
        assert_eq!(out.height(), 32);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(out.get(x, y), img.get(x, y));
            }
        }
        // The gutter stays black and the right panel got ink.
        assert!((0..32).all(|y| (32..36).all(|x| out.get(x, y) == 0)));
        assert_eq!(out.get(36 + 4, 4), INK);
    }

    #[test]
    fn matching_boxes_render_identically_in_both_panels() {
        let img = flat(40);
        let b = BBox::new(8.0, 10.0, 12.0, 6.0);
        let dets = [Detection {
            class_id: 0,
            bbox: b,
            score: 0.5,
        }];
        let gts = [Annotation {
            class_id: 0,
            bbox: b,
        }];
        let out = overlay(&img, &dets, &gts);
        // Compare the box rows only; the left panel also has a score label.
        for y in 10..16 {
            for x in 8..20 {
                assert_eq!(out.get(x, y), out.get(40 + GUTTER_PX + x, y));
            }
        }
        assert_eq!(out.get(8, 10), INK);
    }

    #[test]
    fn rects_clip_to_bounds() {
        let mut img = flat(16);
        draw_rect(&mut img, &BBox::new(-5.0, -5.0, 40.0, 40.0));
        assert_eq!(img.get(0, 0), INK);
        assert_eq!(img.get(15, 15), INK);
        draw_rect(&mut img, &BBox::new(50.0, 50.0, 5.0, 5.0));
    }

    #[test]
    fn score_text_is_drawn_above_the_box() {
        let mut img = flat(32);
        draw_score(&mut img, &BBox::new(10.0, 10.0, 8.0, 8.0), 0.87);
        // "0.87" starts at (10, 3): glyph '0' has its top-left pixel set.
        assert_eq!(img.get(10, 3), INK);
        let inked = img.pixels().iter().filter(|p| **p == INK).count();
        assert!(inked > 10, "glyphs drew {inked} pixels");
    }
}
