//! Raw logit grids and the bounded box decode.
//!
//! Per cell the head emits `(t_x, t_y, t_w, t_h, t_o)`. Centers decode to
//! `(2*sigmoid(t) - 0.5 + cell_index) * stride`, letting a cell place its
//! center up to half a cell outside itself. Sizes decode to
//! `sigmoid(t)^2 * max_frac * input_extent`, so a finite logit can never
//! reach the configured maximum size. Confidence is a plain sigmoid.

use ndarray::Array3;

use super::ModelConfig;
use crate::geometry::{nms, BBox, Detection, Space};

/// One pyramid level of raw head outputs for a single image.
#[derive(Debug, Clone)]
pub struct RawGridPrediction {
    pub level: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(grid_h, grid_w, 5)` logits: x, y, width, height, confidence.
    pub values: Array3<f64>,
}

impl RawGridPrediction {
    pub fn new(level: usize, values: Array3<f64>) -> Self {
        let (gh, gw, ch) = values.dim();
        assert_eq!(ch, 5, "raw grid last dimension must be 5, got {ch}");
        Self {
            level,
            grid_h: gh,
            grid_w: gw,
            values,
        }
    }
}

/// Decoded per-cell boxes in pixel space of the model input.
#[derive(Debug, Clone)]
pub struct DecodedGrid {
    pub level: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(grid_h, grid_w, 5)`: cx_px, cy_px, w_px, h_px, confidence.
    pub cells: Array3<f64>,
}

impl DecodedGrid {
    pub fn bbox(&self, row: usize, col: usize) -> BBox {
        BBox::new(
            self.cells[(row, col, 0)],
            self.cells[(row, col, 1)],
            self.cells[(row, col, 2)],
            self.cells[(row, col, 3)],
            Space::Pixel,
        )
    }

    pub fn confidence(&self, row: usize, col: usize) -> f64 {
        self.cells[(row, col, 4)]
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decode one raw grid into pixel-space boxes and confidences.
pub fn decode_grid(raw: &RawGridPrediction, cfg: &ModelConfig) -> DecodedGrid {
    let (gh, gw) = (raw.grid_h, raw.grid_w);
    let stride_x = cfg.input_w as f64 / gw as f64;
    let stride_y = cfg.input_h as f64 / gh as f64;
    let max_w = cfg.max_w_frac * cfg.input_w as f64;
    let max_h = cfg.max_h_frac * cfg.input_h as f64;
    let mut cells = Array3::zeros((gh, gw, 5));
    for r in 0..gh {
        for c in 0..gw {
            let t = |k: usize| raw.values[(r, c, k)];
            let sw = sigmoid(t(2));
            let sh = sigmoid(t(3));
            cells[(r, c, 0)] = (2.0 * sigmoid(t(0)) - 0.5 + c as f64) * stride_x;
            cells[(r, c, 1)] = (2.0 * sigmoid(t(1)) - 0.5 + r as f64) * stride_y;
            cells[(r, c, 2)] = sw * sw * max_w;
            cells[(r, c, 3)] = sh * sh * max_h;
            cells[(r, c, 4)] = sigmoid(t(4));
        }
    }
    DecodedGrid {
        level: raw.level,
        grid_h: gh,
        grid_w: gw,
        cells,
    }
}

/// Flatten one raw grid into per-cell detections (pixel space, unfiltered).
pub fn decode(raw: &RawGridPrediction, cfg: &ModelConfig) -> Vec<Detection> {
    let grid = decode_grid(raw, cfg);
    let mut out = Vec::with_capacity(grid.grid_h * grid.grid_w);
    for r in 0..grid.grid_h {
        for c in 0..grid.grid_w {
            out.push(Detection {
                bbox: grid.bbox(r, c),
                confidence: grid.confidence(r, c),
            });
        }
    }
    out
}

/// Decode all levels, filter by confidence and apply NMS.
///
/// `conf_thresh` may be 1.0 (nothing passes, since confidences are open
/// sigmoid outputs); filtering before NMS keeps suppression unchanged
/// because only higher-confidence boxes suppress lower ones.
pub fn predict_from_raw(
    raws: &[RawGridPrediction],
    cfg: &ModelConfig,
    conf_thresh: f64,
    nms_iou_thresh: f64,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for raw in raws {
        dets.extend(decode(raw, cfg).into_iter().filter(|d| d.confidence >= conf_thresh));
    }
    nms(&dets, nms_iou_thresh, 0.0)
}

/// Inverse of the center decode: pixel coordinate -> (cell index, logit).
/// The offset is encoded inside the primary cell, so the logit stays in the
/// well-conditioned middle of the sigmoid.
pub fn encode_center(coord_px: f64, stride: f64, grid_len: usize) -> (usize, f64) {
    let cellf = (coord_px / stride).floor();
    let cell = (cellf as isize).clamp(0, grid_len as isize - 1) as usize;
    let offset = coord_px / stride - cell as f64; // in [0, 1)
    let p = (offset + 0.5) / 2.0; // sigmoid target in [0.25, 0.75]
    let logit = (p / (1.0 - p)).ln();
    (cell, logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneId;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_2048() -> ModelConfig {
        ModelConfig {
            input_h: 2048,
            input_w: 2048,
            max_w_frac: 0.1,
            max_h_frac: 0.1,
            backbone: BackboneId::Yolov7Tiny,
            level_strides: [8, 16, 32],
            neck_width_multiplier: 1.0,
            num_levels: 3,
        }
    }

    #[test]
    fn zero_logits_decode_to_cell_center_values() {
        // grid 64 on a 2048 input: stride 32
        let raw = RawGridPrediction::new(0, Array3::zeros((64, 64, 5)));
        let grid = decode_grid(&raw, &cfg_2048());
        // (2*0.5 - 0.5 + 0) * 32 = 16
        assert_abs_diff_eq!(grid.cells[(0, 0, 0)], 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grid.cells[(0, 0, 1)], 16.0, epsilon = 1e-12);
        // 0.25 * 0.1 * 2048 = 51.2
        assert_abs_diff_eq!(grid.cells[(0, 0, 2)], 51.2, epsilon = 1e-9);
        assert_abs_diff_eq!(grid.cells[(0, 0, 4)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_limits_bound_the_decode() {
        let mut values = Array3::zeros((64, 64, 5));
        values[(0, 0, 0)] = -40.0; // t_x -> -inf: offset -> -0.5 cells
        values[(0, 0, 2)] = 40.0; // t_w -> +inf: w -> max
        let raw = RawGridPrediction::new(0, values);
        let cfg = cfg_2048();
        let grid = decode_grid(&raw, &cfg);
        assert_abs_diff_eq!(grid.cells[(0, 0, 0)], -0.5 * 32.0, epsilon = 1e-9);
        assert!(grid.cells[(0, 0, 2)] <= 0.1 * 2048.0);
    }

    #[test]
    fn decode_is_monotone_and_strictly_bounded() {
        let cfg = cfg_2048();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prev_w = -1.0;
        for i in 0..1000 {
            // increasing t_w strictly increases w
            let t = -15.0 + 30.0 * (i as f64) / 999.0;
            let mut values = Array3::zeros((4, 4, 5));
            values[(0, 0, 2)] = t;
            let raw = RawGridPrediction::new(0, values);
            let g = decode_grid(&raw, &cfg);
            assert!(g.cells[(0, 0, 2)] > prev_w);
            prev_w = g.cells[(0, 0, 2)];
        }
        for _ in 0..1000 {
            let mut values = Array3::zeros((2, 2, 5));
            for v in values.iter_mut() {
                *v = rng.gen_range(-15.0..15.0);
            }
            let raw = RawGridPrediction::new(0, values);
            let g = decode_grid(&raw, &cfg);
            for r in 0..2 {
                for c in 0..2 {
                    assert!(g.cells[(r, c, 2)] < cfg.max_w_frac * cfg.input_w as f64);
                    assert!(g.cells[(r, c, 3)] < cfg.max_h_frac * cfg.input_h as f64);
                }
            }
        }
    }

    #[test]
    fn center_encode_decode_roundtrip() {
        let cfg = cfg_2048();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let cx = rng.gen_range(0.0..cfg.input_w as f64);
            let stride = 32.0;
            let (cell, logit) = encode_center(cx, stride, 64);
            let decoded = (2.0 * sigmoid(logit) - 0.5 + cell as f64) * stride;
            assert!(
                (decoded - cx).abs() <= 1e-6 * cfg.input_w as f64,
                "{cx} -> {decoded}"
            );
        }
    }

    #[test]
    fn duplicate_boxes_across_levels_collapse_in_nms() {
        let cfg = ModelConfig {
            input_h: 64,
            input_w: 64,
            max_w_frac: 0.5,
            max_h_frac: 0.5,
            ..cfg_2048()
        };
        // level 0 (stride 8) and level 1 (stride 16) decode the same box
        let quiet = -20.0;
        let mut l0 = Array3::from_elem((8, 8, 5), 0.0);
        let mut l1 = Array3::from_elem((4, 4, 5), 0.0);
        for g in [&mut l0, &mut l1] {
            for r in 0..g.dim().0 {
                for c in 0..g.dim().1 {
                    g[(r, c, 4)] = quiet;
                }
            }
        }
        // target center 6px: offset 6/8 at level 0 cell 0; 6/16 at level 1 cell 0
        let logit_for = |offset: f64| {
            let p: f64 = (offset + 0.5) / 2.0;
            (p / (1.0 - p)).ln()
        };
        for (grid, stride) in [(&mut l0, 8.0), (&mut l1, 16.0)] {
            grid[(0, 0, 0)] = logit_for(6.0 / stride);
            grid[(0, 0, 1)] = logit_for(6.0 / stride);
            grid[(0, 0, 2)] = 0.3; // same size logits decode identically at both levels
            grid[(0, 0, 3)] = 0.3;
        }
        l0[(0, 0, 4)] = 2.0; // conf 0.88
        l1[(0, 0, 4)] = 1.0; // conf 0.73
        let raws = vec![RawGridPrediction::new(0, l0), RawGridPrediction::new(1, l1)];
        let dets = predict_from_raw(&raws, &cfg, 0.1, 0.45);
        assert_eq!(dets.len(), 1, "duplicates should collapse to one");
        assert!((dets[0].confidence - sigmoid(2.0)).abs() < 1e-9);
        // conf_thresh = 1.0 passes nothing
        assert!(predict_from_raw(&raws, &cfg, 1.0, 0.45).is_empty());
    }
}
