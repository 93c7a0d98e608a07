//! Aspect-preserving resize plus symmetric padding to a square input, with
//! invertible box transforms.

use image::{imageops, Rgb, RgbImage};

use crate::geometry::{BBox, Space};

const PAD_GRAY: u8 = 114;

/// Forward/inverse mapping between source-image and model-input coordinates.
#[derive(Debug, Clone, Copy)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_w: u32,
    pub orig_h: u32,
    pub target: u32,
}

impl LetterboxTransform {
    /// Normalized box in the source image -> pixel box in the model input.
    pub fn box_to_input(&self, b: &BBox) -> BBox {
        assert_eq!(b.space, Space::Normalized);
        BBox::new(
            b.cx * self.orig_w as f64 * self.scale + self.pad_x,
            b.cy * self.orig_h as f64 * self.scale + self.pad_y,
            b.w * self.orig_w as f64 * self.scale,
            b.h * self.orig_h as f64 * self.scale,
            Space::Pixel,
        )
    }

    /// Pixel box in the model input -> normalized box in the source image,
    /// clipped to `[0, 1]`.
    pub fn box_to_normalized(&self, b: &BBox) -> BBox {
        assert_eq!(b.space, Space::Pixel);
        let cx = (b.cx - self.pad_x) / self.scale / self.orig_w as f64;
        let cy = (b.cy - self.pad_y) / self.scale / self.orig_h as f64;
        let w = b.w / self.scale / self.orig_w as f64;
        let h = b.h / self.scale / self.orig_h as f64;
        let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
        let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
        let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
        let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
        BBox::from_corners(x1, y1, x2, y2, Space::Normalized)
    }

    /// Same inverse without the clip (used by round-trip checks).
    pub fn box_to_normalized_unclipped(&self, b: &BBox) -> BBox {
        assert_eq!(b.space, Space::Pixel);
        BBox::new(
            (b.cx - self.pad_x) / self.scale / self.orig_w as f64,
            (b.cy - self.pad_y) / self.scale / self.orig_h as f64,
            b.w / self.scale / self.orig_w as f64,
            b.h / self.scale / self.orig_h as f64,
            Space::Normalized,
        )
    }
}

/// Resize preserving aspect ratio and pad to `target x target` mid-gray.
pub fn letterbox_image(img: &RgbImage, target: u32) -> (RgbImage, LetterboxTransform) {
    let (w, h) = img.dimensions();
    let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).clamp(1, target);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, target);
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, imageops::FilterType::Triangle)
    };
    let pad_left = (target - nw) / 2;
    let pad_top = (target - nh) / 2;
    let mut canvas = RgbImage::from_pixel(target, target, Rgb([PAD_GRAY, PAD_GRAY, PAD_GRAY]));
    imageops::overlay(&mut canvas, &resized, pad_left as i64, pad_top as i64);
    (
        canvas,
        LetterboxTransform {
            scale,
            pad_x: pad_left as f64,
            pad_y: pad_top as f64,
            orig_w: w,
            orig_h: h,
            target,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_to_square_is_pure_scale() {
        let img = RgbImage::from_pixel(100, 100, Rgb([10, 10, 10]));
        let (out, tf) = letterbox_image(&img, 64);
        assert_eq!(out.dimensions(), (64, 64));
        assert_eq!(tf.pad_x, 0.0);
        assert_eq!(tf.pad_y, 0.0);
        assert_abs_diff_eq!(tf.scale, 0.64);
    }

    #[test]
    fn two_to_one_image_pads_quarter_each_side() {
        let img = RgbImage::from_pixel(200, 100, Rgb([10, 10, 10]));
        let (out, tf) = letterbox_image(&img, 64);
        assert_eq!(out.dimensions(), (64, 64));
        // scaled to 64x32, vertical pads of 64/4 = 16
        assert_eq!(tf.pad_y, 16.0);
        assert_eq!(tf.pad_x, 0.0);
        // padded rows are mid-gray, content rows are not
        assert_eq!(out.get_pixel(32, 0).0, [PAD_GRAY, PAD_GRAY, PAD_GRAY]);
        assert_eq!(out.get_pixel(32, 32).0, [10, 10, 10]);
    }

    #[test]
    fn box_roundtrip_within_half_pixel() {
        let img = RgbImage::from_pixel(300, 170, Rgb([0, 0, 0]));
        let (_, tf) = letterbox_image(&img, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let b = BBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
                Space::Normalized,
            );
            let fwd = tf.box_to_input(&b);
            let back = tf.box_to_normalized_unclipped(&fwd);
            // 0.5 px in source-image units
            let tol = 0.5 / 170.0;
            assert!((back.cx - b.cx).abs() < tol);
            assert!((back.cy - b.cy).abs() < tol);
            assert!((back.w - b.w).abs() < tol);
            assert!((back.h - b.h).abs() < tol);
        }
    }
}
