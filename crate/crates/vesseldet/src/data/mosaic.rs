//! Mosaic augmentation: a 2x2 composite of four samples around a random
//! center point. Off by default in training configs; kept as a switchable
//! technique for ablations.

use image::RgbImage;
use rand::Rng;

use crate::geometry::{BBox, Space};

/// Boxes clipped below this visible area are dropped from the composite.
const MIN_VISIBLE_AREA: f64 = 4.0;

/// Compose four equally sized samples around `center` (pixel coordinates in
/// the output). Sample `i` occupies quadrant `i` (row-major: top-left,
/// top-right, bottom-left, bottom-right) with its corner adjacent to the
/// center point; boxes are shifted, clipped to their quadrant, and dropped
/// when nearly invisible.
pub fn mosaic_augment_at(
    samples: [(&RgbImage, &[BBox]); 4],
    center: (u32, u32),
) -> (RgbImage, Vec<BBox>) {
    let (w, h) = samples[0].0.dimensions();
    for (img, _) in &samples {
        assert_eq!(img.dimensions(), (w, h), "mosaic samples must share a size");
    }
    let (mx, my) = (center.0.min(w), center.1.min(h));
    let mut out = RgbImage::new(w, h);
    let mut boxes = Vec::new();

    // destination rectangle and source-origin offset per quadrant
    let quads = [
        ((0, 0, mx, my), (mx as i64 - w as i64, my as i64 - h as i64)),
        ((mx, 0, w, my), (mx as i64, my as i64 - h as i64)),
        ((0, my, mx, h), (mx as i64 - w as i64, my as i64)),
        ((mx, my, w, h), (mx as i64, my as i64)),
    ];
    for ((img, gts), ((x0, y0, x1, y1), (ox, oy))) in samples.iter().zip(quads) {
        for y in y0..y1 {
            for x in x0..x1 {
                let sx = x as i64 - ox;
                let sy = y as i64 - oy;
                if sx >= 0 && sy >= 0 && (sx as u32) < w && (sy as u32) < h {
                    out.put_pixel(x, y, *img.get_pixel(sx as u32, sy as u32));
                }
            }
        }
        for b in *gts {
            assert_eq!(b.space, Space::Pixel, "mosaic boxes must be in pixel space");
            let (bx1, by1, bx2, by2) = b.corners();
            let cx1 = (bx1 + ox as f64).max(x0 as f64);
            let cy1 = (by1 + oy as f64).max(y0 as f64);
            let cx2 = (bx2 + ox as f64).min(x1 as f64);
            let cy2 = (by2 + oy as f64).min(y1 as f64);
            if cx2 <= cx1 || cy2 <= cy1 {
                continue; // fully outside its visible quadrant
            }
            if (cx2 - cx1) * (cy2 - cy1) < MIN_VISIBLE_AREA {
                continue;
            }
            boxes.push(BBox::from_corners(cx1, cy1, cx2, cy2, Space::Pixel));
        }
    }
    (out, boxes)
}

/// Mosaic with the center drawn uniformly from the middle half of the image.
pub fn mosaic_augment(
    samples: [(&RgbImage, &[BBox]); 4],
    rng: &mut impl Rng,
) -> (RgbImage, Vec<BBox>) {
    let (w, h) = samples[0].0.dimensions();
    let mx = rng.gen_range(w / 4..=3 * w / 4);
    let my = rng.gen_range(h / 4..=3 * h / 4);
    mosaic_augment_at(samples, (mx, my))
}
