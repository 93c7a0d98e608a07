//! Ground-truth-to-grid-cell assignment and the training loss.
//!
//! Every ground-truth box is assigned on all three pyramid levels. Its
//! primary cell is the one containing the box center; the 2- and 4-neighbor
//! modes duplicate the box into adjacent non-diagonal cells (for mode 2, the
//! two cells nearest the center's sub-cell offset). The loss is
//! `L = L_r + L_p`: an IoU-variant regression term averaged over assigned
//! entries, and binary cross-entropy on the confidence channel over every
//! grid cell, with the IoU against the assigned box (detached) as the
//! positive target.

use ndarray::Array3;

use crate::geometry::{iou, BBox, IouVariant, Space};
use crate::model::{decode_grid, sigmoid, DecodedGrid, ModelConfig, RawGridPrediction};

/// How many neighboring cells join the primary cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborMode {
    Zero,
    Two,
    Four,
}

impl NeighborMode {
    pub const ALL: [NeighborMode; 3] = [NeighborMode::Zero, NeighborMode::Two, NeighborMode::Four];

    pub fn from_count(count: u8) -> Result<Self, String> {
        match count {
            0 => Ok(NeighborMode::Zero),
            2 => Ok(NeighborMode::Two),
            4 => Ok(NeighborMode::Four),
            other => Err(format!("neighbor mode must be 0, 2 or 4, got {other}")),
        }
    }

    pub fn count(&self) -> u8 {
        match self {
            NeighborMode::Zero => 0,
            NeighborMode::Two => 2,
            NeighborMode::Four => 4,
        }
    }
}

/// One (cell, ground-truth) pair produced by assignment.
#[derive(Debug, Clone)]
pub struct TargetEntry {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub gt: BBox,
    pub is_primary: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TargetAssignment {
    pub entries: Vec<TargetEntry>,
}

impl TargetAssignment {
    /// Number of assigned entries (the `m` normalizing the loss).
    pub fn m(&self) -> usize {
        self.entries.len()
    }
}

/// Assign ground-truth boxes (pixel space) to grid cells on every level.
///
/// Boxes wider or taller than the decodable maximum are kept — the
/// regression loss saturates toward the maximum size — but logged, since
/// they cannot be represented exactly.
pub fn assign_targets(
    gts: &[BBox],
    cfg: &ModelConfig,
    mode: NeighborMode,
) -> TargetAssignment {
    let max_w = cfg.max_w_frac * cfg.input_w as f64;
    let max_h = cfg.max_h_frac * cfg.input_h as f64;
    let mut entries = Vec::new();
    for gt in gts {
        assert_eq!(gt.space, Space::Pixel, "ground truth must be in pixel space");
        debug_assert!(gt.area() > 0.0, "ground truth must have positive area");
        if gt.w > max_w || gt.h > max_h {
            log::warn!(
                "ground truth {:.1}x{:.1} exceeds the decodable maximum {:.1}x{:.1}; \
                 the regression loss will saturate",
                gt.w,
                gt.h,
                max_w,
                max_h
            );
        }
        for level in 0..cfg.num_levels {
            let (gh, gw) = cfg.grid_dims(level);
            let sx = cfg.input_w as f64 / gw as f64;
            let sy = cfg.input_h as f64 / gh as f64;
            let colf = (gt.cx / sx).floor();
            let rowf = (gt.cy / sy).floor();
            let col = (colf as isize).clamp(0, gw as isize - 1);
            let row = (rowf as isize).clamp(0, gh as isize - 1);
            // sub-cell offset decides which two neighbors are nearest
            let fx = gt.cx / sx - col as f64;
            let fy = gt.cy / sy - row as f64;

            let mut cells: Vec<(isize, isize, bool)> = vec![(row, col, true)];
            match mode {
                NeighborMode::Zero => {}
                NeighborMode::Two => {
                    let dx: isize = if fx >= 0.5 { 1 } else { -1 };
                    let dy: isize = if fy >= 0.5 { 1 } else { -1 };
                    cells.push((row, col + dx, false));
                    cells.push((row + dy, col, false));
                }
                NeighborMode::Four => {
                    for (dr, dc) in [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)] {
                        cells.push((row + dr, col + dc, false));
                    }
                }
            }
            for (r, c, is_primary) in cells {
                if r < 0 || c < 0 || r >= gh as isize || c >= gw as isize {
                    continue; // neighbor falls outside the grid
                }
                entries.push(TargetEntry {
                    level,
                    row: r as usize,
                    col: c as usize,
                    gt: *gt,
                    is_primary,
                });
            }
        }
    }
    TargetAssignment { entries }
}

const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy with the probability clamped away from {0, 1}.
fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Mean over assigned entries of `1 - measure(pred, gt)`, evaluated only at
/// assigned cells. Defined as 0 when nothing is assigned.
pub fn regression_loss(
    decoded: &[DecodedGrid],
    asg: &TargetAssignment,
    variant: IouVariant,
) -> f64 {
    if asg.entries.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for e in &asg.entries {
        let grid = &decoded[e.level];
        let pred = grid.bbox(e.row, e.col);
        sum += 1.0 - variant.measure(&pred, &e.gt);
    }
    sum / asg.m() as f64
}

/// The per-entry objectness targets: `iou(pred, gt)` at each assigned cell.
/// The loss treats these as constants (no gradient flows through them), so
/// finite-difference checks must evaluate the loss with the targets frozen.
pub fn objectness_targets(decoded: &[DecodedGrid], asg: &TargetAssignment) -> Vec<f64> {
    asg.entries
        .iter()
        .map(|e| {
            let grid = &decoded[e.level];
            iou(&grid.bbox(e.row, e.col), &e.gt)
        })
        .collect()
}

/// Binary cross-entropy over the confidence channel of every cell on every
/// level. Assigned entries use `iou(pred, gt)` as the target (constant, no
/// gradient through it); unassigned cells use target 0. The whole sum is
/// normalized by the entry count `m`, so positives and negatives push with
/// comparable strength; with nothing assigned the negatives fall back to
/// their per-cell mean, keeping the empty-image loss scale-free.
pub fn objectness_loss(decoded: &[DecodedGrid], asg: &TargetAssignment) -> f64 {
    let targets = objectness_targets(decoded, asg);
    let (pos, neg) = objectness_parts(decoded, asg, &targets);
    pos + neg
}

fn objectness_parts(
    decoded: &[DecodedGrid],
    asg: &TargetAssignment,
    targets: &[f64],
) -> (f64, f64) {
    assert_eq!(targets.len(), asg.entries.len());
    let n_total: usize = decoded.iter().map(|g| g.grid_h * g.grid_w).sum();
    let mut assigned: Vec<ndarray::Array2<bool>> = decoded
        .iter()
        .map(|g| ndarray::Array2::from_elem((g.grid_h, g.grid_w), false))
        .collect();

    let mut pos_sum = 0.0;
    for (e, &target) in asg.entries.iter().zip(targets) {
        let grid = &decoded[e.level];
        pos_sum += bce(grid.confidence(e.row, e.col), target);
        assigned[e.level][(e.row, e.col)] = true;
    }
    let mut neg_sum = 0.0;
    for (grid, mask) in decoded.iter().zip(&assigned) {
        for r in 0..grid.grid_h {
            for c in 0..grid.grid_w {
                if !mask[(r, c)] {
                    neg_sum += bce(grid.confidence(r, c), 0.0);
                }
            }
        }
    }
    if asg.entries.is_empty() {
        (0.0, neg_sum / n_total as f64)
    } else {
        let m = asg.m() as f64;
        (pos_sum / m, neg_sum / m)
    }
}

/// `L = L_r + L_p` with externally supplied (frozen) objectness targets.
/// This is the differentiated function: `total_loss` equals it with targets
/// recomputed from the current predictions.
pub fn total_loss_frozen_targets(
    decoded: &[DecodedGrid],
    asg: &TargetAssignment,
    variant: IouVariant,
    targets: &[f64],
) -> f64 {
    let (pos, neg) = objectness_parts(decoded, asg, targets);
    regression_loss(decoded, asg, variant) + (pos + neg)
}

/// `L = L_r + L_p`, unweighted.
pub fn total_loss(decoded: &[DecodedGrid], asg: &TargetAssignment, variant: IouVariant) -> f64 {
    let targets = objectness_targets(decoded, asg);
    total_loss_frozen_targets(decoded, asg, variant, &targets)
}

/// Loss and its exact gradient with respect to every raw logit.
///
/// Decodes internally so the chain through the sigmoid transforms is
/// consistent with `decode_grid`; the returned value equals
/// `total_loss(decoded, ...)` on the decoded grids.
pub fn total_loss_with_grad(
    raws: &[RawGridPrediction],
    cfg: &ModelConfig,
    asg: &TargetAssignment,
    variant: IouVariant,
) -> (f64, Vec<Array3<f64>>) {
    let decoded: Vec<DecodedGrid> = raws.iter().map(|r| decode_grid(r, cfg)).collect();
    let mut grads: Vec<Array3<f64>> = raws
        .iter()
        .map(|r| Array3::zeros((r.grid_h, r.grid_w, 5)))
        .collect();

    let m = asg.m() as f64;
    let max_w = cfg.max_w_frac * cfg.input_w as f64;
    let max_h = cfg.max_h_frac * cfg.input_h as f64;

    // regression term and the positive objectness gradient
    for e in &asg.entries {
        let grid = &decoded[e.level];
        let raw = &raws[e.level];
        let pred = grid.bbox(e.row, e.col);
        let (_measure, d_measure) = variant.measure_with_grad(&pred, &e.gt);

        let sx = cfg.input_w as f64 / grid.grid_w as f64;
        let sy = cfg.input_h as f64 / grid.grid_h as f64;
        let s = |k: usize| sigmoid(raw.values[(e.row, e.col, k)]);
        // d cx / d t_x = 2 s'(t) * stride, s' = s(1-s)
        let (s0, s1, s2, s3) = (s(0), s(1), s(2), s(3));
        let d_box_d_t = [
            2.0 * s0 * (1.0 - s0) * sx,
            2.0 * s1 * (1.0 - s1) * sy,
            2.0 * s2 * s2 * (1.0 - s2) * max_w,
            2.0 * s3 * s3 * (1.0 - s3) * max_h,
        ];
        let g = &mut grads[e.level];
        for k in 0..4 {
            g[(e.row, e.col, k)] += (-1.0 / m) * d_measure[k] * d_box_d_t[k];
        }
        // positive objectness: the target is the detached IoU
        let target = iou(&pred, &e.gt);
        let conf = grid.confidence(e.row, e.col);
        g[(e.row, e.col, 4)] += (conf - target) / m;
    }

    // negative objectness gradient: every unassigned cell pulls toward 0,
    // with the same 1/m weight as the positives (1/total when m = 0)
    let n_total: usize = decoded.iter().map(|g| g.grid_h * g.grid_w).sum();
    let neg_norm = if asg.entries.is_empty() {
        n_total as f64
    } else {
        m
    };
    let mut assigned: Vec<ndarray::Array2<bool>> = decoded
        .iter()
        .map(|g| ndarray::Array2::from_elem((g.grid_h, g.grid_w), false))
        .collect();
    for e in &asg.entries {
        assigned[e.level][(e.row, e.col)] = true;
    }
    for (level, grid) in decoded.iter().enumerate() {
        for r in 0..grid.grid_h {
            for c in 0..grid.grid_w {
                if !assigned[level][(r, c)] {
                    grads[level][(r, c, 4)] += grid.confidence(r, c) / neg_norm;
                }
            }
        }
    }

    let targets = objectness_targets(&decoded, asg);
    let value = total_loss_frozen_targets(&decoded, asg, variant, &targets);
    (value, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneId;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(input: usize) -> ModelConfig {
        ModelConfig {
            input_h: input,
            input_w: input,
            max_w_frac: 0.5,
            max_h_frac: 0.5,
            backbone: BackboneId::Yolov7Tiny,
            level_strides: [8, 16, 32],
            neck_width_multiplier: 1.0,
            num_levels: 3,
        }
    }

    /// Toy config: three 2x2 levels over an 8x8 input.
    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            input_h: 8,
            input_w: 8,
            max_w_frac: 0.6,
            max_h_frac: 0.6,
            level_strides: [4, 4, 4],
            ..cfg(8)
        }
    }

    fn gt(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h, Space::Pixel)
    }

    #[test]
    fn entry_counts_per_mode() {
        let cfg = cfg(128);
        // interior box: its primary cell has all four neighbors on every
        // level (the stride-32 grid is 4x4, so the cell must be central)
        let boxes = vec![gt(60.0, 60.0, 10.0, 10.0)];
        assert_eq!(assign_targets(&boxes, &cfg, NeighborMode::Zero).m(), 3);
        assert_eq!(assign_targets(&boxes, &cfg, NeighborMode::Two).m(), 9);
        assert_eq!(assign_targets(&boxes, &cfg, NeighborMode::Four).m(), 15);
    }

    #[test]
    fn corner_gt_clips_neighbors() {
        let cfg = cfg(64);
        // primary cell (0, 0) on every level, offsets in the upper-left quadrant
        let boxes = vec![gt(1.0, 1.0, 2.0, 2.0)];
        let asg = assign_targets(&boxes, &cfg, NeighborMode::Four);
        // left and up neighbors clipped on all levels: 3 entries per level
        assert_eq!(asg.m(), 9);
        for level in 0..3 {
            assert_eq!(asg.entries.iter().filter(|e| e.level == level).count(), 3);
        }
        // mode 2 keeps only the primary (both nearest neighbors clipped)
        assert_eq!(assign_targets(&boxes, &cfg, NeighborMode::Two).m(), 3);
    }

    #[test]
    fn mode_two_follows_subcell_quadrant() {
        let cfg = cfg(64);
        // stride 8 at level 0; center (12.0, 10.0) -> cell (1, 1), fx = 0.5, fy = 0.25:
        // upper-right quadrant selects the right and upper cells
        let boxes = vec![gt(12.0, 10.0, 4.0, 4.0)];
        let asg = assign_targets(&boxes, &cfg, NeighborMode::Two);
        let level0: Vec<_> = asg.entries.iter().filter(|e| e.level == 0).collect();
        assert_eq!(level0.len(), 3);
        assert!(level0[0].is_primary && level0[0].row == 1 && level0[0].col == 1);
        let neighbors: Vec<(usize, usize)> =
            level0[1..].iter().map(|e| (e.row, e.col)).collect();
        assert!(neighbors.contains(&(1, 2)), "right cell: {neighbors:?}");
        assert!(neighbors.contains(&(0, 1)), "upper cell: {neighbors:?}");
    }

    #[test]
    fn modes_are_nested() {
        let cfg = cfg(64);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let b = vec![gt(
                rng.gen_range(4.0..60.0),
                rng.gen_range(4.0..60.0),
                rng.gen_range(2.0..8.0),
                rng.gen_range(2.0..8.0),
            )];
            let key = |asg: &TargetAssignment| -> std::collections::BTreeSet<(usize, usize, usize)> {
                asg.entries.iter().map(|e| (e.level, e.row, e.col)).collect()
            };
            let m0 = key(&assign_targets(&b, &cfg, NeighborMode::Zero));
            let m2 = key(&assign_targets(&b, &cfg, NeighborMode::Two));
            let m4 = key(&assign_targets(&b, &cfg, NeighborMode::Four));
            assert!(m0.is_subset(&m2));
            assert!(m2.is_subset(&m4));
        }
    }

    /// Hand-built decoded grids for the toy config.
    fn toy_decoded(fill: impl Fn(usize, usize, usize) -> [f64; 5]) -> Vec<DecodedGrid> {
        (0..3)
            .map(|level| {
                let mut cells = Array3::zeros((2, 2, 5));
                for r in 0..2 {
                    for c in 0..2 {
                        let v = fill(level, r, c);
                        for k in 0..5 {
                            cells[(r, c, k)] = v[k];
                        }
                    }
                }
                DecodedGrid {
                    level,
                    grid_h: 2,
                    grid_w: 2,
                    cells,
                }
            })
            .collect()
    }

    #[test]
    fn regression_loss_examples() {
        let cfg = toy_cfg();
        let b = gt(4.0, 4.0, 2.0, 2.0);
        let asg = assign_targets(&[b], &cfg, NeighborMode::Zero);
        // every cell predicts exactly the gt
        let perfect = toy_decoded(|_, _, _| [4.0, 4.0, 2.0, 2.0, 0.5]);
        assert_abs_diff_eq!(
            regression_loss(&perfect, &asg, IouVariant::Iou),
            0.0,
            epsilon = 1e-12
        );
        // disjoint predictions: 1 - 0 per entry
        let disjoint = toy_decoded(|_, _, _| [1.0, 1.0, 1.0, 1.0, 0.5]);
        assert_abs_diff_eq!(
            regression_loss(&disjoint, &asg, IouVariant::Iou),
            1.0,
            epsilon = 1e-12
        );
        // no ground truth: defined as zero
        assert_eq!(
            regression_loss(&perfect, &TargetAssignment::default(), IouVariant::Iou),
            0.0
        );
    }

    #[test]
    fn regression_loss_partial_overlap() {
        // single-level assignment with one entry where iou(pred, gt) = 1/3
        let cfg = toy_cfg();
        let b = gt(1.0, 1.0, 2.0, 2.0); // corners (0,0,2,2)
        let mut asg = assign_targets(&[b], &cfg, NeighborMode::Zero);
        asg.entries.truncate(1); // keep one entry -> m = 1
        let (r, c) = (asg.entries[0].row, asg.entries[0].col);
        let decoded = toy_decoded(|level, rr, cc| {
            if level == 0 && rr == r && cc == c {
                [2.0, 1.0, 2.0, 2.0, 0.5] // corners (1,0,3,2): iou 1/3 with gt
            } else {
                [1.0, 1.0, 2.0, 2.0, 0.5]
            }
        });
        assert_abs_diff_eq!(
            regression_loss(&decoded, &asg, IouVariant::Iou),
            2.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn objectness_loss_examples() {
        // no gts, all confidences 0.5: mean BCE is ln 2
        let decoded = toy_decoded(|_, _, _| [4.0, 4.0, 2.0, 2.0, 0.5]);
        let empty = TargetAssignment::default();
        assert_abs_diff_eq!(
            objectness_loss(&decoded, &empty),
            std::f64::consts::LN_2,
            epsilon = 1e-9
        );

        // perfect predictions: conf ~1 and iou 1 at assigned, ~0 elsewhere
        let cfg = toy_cfg();
        let b = gt(4.0, 4.0, 2.0, 2.0);
        let asg = assign_targets(&[b], &cfg, NeighborMode::Zero);
        let is_assigned = |level: usize, r: usize, c: usize| {
            asg.entries
                .iter()
                .any(|e| e.level == level && e.row == r && e.col == c)
        };
        let sharp = toy_decoded(|level, r, c| {
            let conf = if is_assigned(level, r, c) { 1.0 } else { 0.0 };
            [4.0, 4.0, 2.0, 2.0, conf]
        });
        assert!(objectness_loss(&sharp, &asg) < 1e-5);

        // a matched-entropy cell: conf = iou target = 1/3
        let entropy_third = -( (1.0f64 / 3.0) * (1.0f64 / 3.0).ln()
            + (2.0 / 3.0) * (2.0f64 / 3.0).ln());
        let mut one = assign_targets(&[gt(1.0, 1.0, 2.0, 2.0)], &cfg, NeighborMode::Zero);
        one.entries.truncate(1);
        let (r0, c0) = (one.entries[0].row, one.entries[0].col);
        let decoded = toy_decoded(|level, r, c| {
            if level == 0 && r == r0 && c == c0 {
                [2.0, 1.0, 2.0, 2.0, 1.0 / 3.0] // iou target 1/3, conf 1/3
            } else {
                [1.0, 1.0, 2.0, 2.0, 0.0]
            }
        });
        let targets = objectness_targets(&decoded, &one);
        assert_abs_diff_eq!(targets[0], 1.0 / 3.0, epsilon = 1e-12);
        let (pos, _neg) = objectness_parts(&decoded, &one, &targets);
        assert_abs_diff_eq!(pos, entropy_third, epsilon = 1e-9);
    }

    #[test]
    fn total_is_sum_and_handles_no_gts() {
        let cfg = toy_cfg();
        let asg = assign_targets(&[gt(4.0, 4.0, 2.0, 2.0)], &cfg, NeighborMode::Two);
        let decoded = toy_decoded(|_, r, c| [2.0 * c as f64 + 1.0, 2.0 * r as f64 + 1.0, 1.5, 1.5, 0.3]);
        let t = total_loss(&decoded, &asg, IouVariant::Giou);
        let sum = regression_loss(&decoded, &asg, IouVariant::Giou)
            + objectness_loss(&decoded, &asg);
        assert_abs_diff_eq!(t, sum, epsilon = 1e-12);
        let empty = TargetAssignment::default();
        assert_abs_diff_eq!(
            total_loss(&decoded, &empty, IouVariant::Giou),
            objectness_loss(&decoded, &empty),
            epsilon = 1e-15
        );
    }

    #[test]
    fn objectness_with_no_gts_ignores_box_channels() {
        let empty = TargetAssignment::default();
        let a = toy_decoded(|_, r, c| [1.0, 1.0, 1.0, 1.0, 0.2 + 0.1 * (r + c) as f64]);
        let b = toy_decoded(|_, r, c| [9.0, 3.0, 0.5, 4.0, 0.2 + 0.1 * (r + c) as f64]);
        assert_eq!(objectness_loss(&a, &empty), objectness_loss(&b, &empty));
    }

    #[test]
    fn per_entry_regression_bounds() {
        // 1 - iou in [0, 1]; 1 - {giou, diou, ciou} in [0, 2]
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..2000 {
            let pred = gt(
                rng.gen_range(-4.0..12.0),
                rng.gen_range(-4.0..12.0),
                rng.gen_range(0.1..6.0),
                rng.gen_range(0.1..6.0),
            );
            let target = gt(
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..4.0),
            );
            let li = 1.0 - IouVariant::Iou.measure(&pred, &target);
            assert!((0.0..=1.0).contains(&li));
            for v in [IouVariant::Giou, IouVariant::Diou, IouVariant::Ciou] {
                let l = 1.0 - v.measure(&pred, &target);
                assert!((0.0..=2.0).contains(&l), "{v:?}: {l}");
            }
        }
    }

    fn random_toy_instance(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<RawGridPrediction>, Vec<BBox>) {
        let raws: Vec<RawGridPrediction> = (0..3)
            .map(|level| {
                let mut v = Array3::zeros((2, 2, 5));
                for x in v.iter_mut() {
                    *x = rng.gen_range(-3.0..3.0);
                }
                RawGridPrediction::new(level, v)
            })
            .collect();
        let n_gts = rng.gen_range(1..=3);
        let gts = (0..n_gts)
            .map(|_| {
                gt(
                    rng.gen_range(2.0..6.0),
                    rng.gen_range(2.0..6.0),
                    rng.gen_range(0.8..3.5),
                    rng.gen_range(0.8..3.5),
                )
            })
            .collect();
        (raws, gts)
    }

    #[test]
    fn with_grad_value_equals_decoded_loss() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let (raws, gts) = random_toy_instance(&mut rng);
            for mode in NeighborMode::ALL {
                let asg = assign_targets(&gts, &cfg, mode);
                for variant in IouVariant::ALL {
                    let (value, _) = total_loss_with_grad(&raws, &cfg, &asg, variant);
                    let decoded: Vec<DecodedGrid> =
                        raws.iter().map(|r| decode_grid(r, &cfg)).collect();
                    let direct = total_loss(&decoded, &asg, variant);
                    assert!(
                        (value - direct).abs() <= 1e-12 * direct.abs().max(1.0),
                        "{value} vs {direct}"
                    );
                }
            }
        }
    }

    /// Central finite differences over every raw logit of random toy
    /// instances, cycling through all neighbor modes and IoU variants.
    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 1e-4;
        let mut max_rel = 0.0f64;
        for trial in 0..20 {
            let (mut raws, gts) = random_toy_instance(&mut rng);
            let mode = NeighborMode::ALL[trial % 3];
            let variant = IouVariant::ALL[trial % 4];
            let asg = assign_targets(&gts, &cfg, mode);
            let (_, grads) = total_loss_with_grad(&raws, &cfg, &asg, variant);
            // the objectness target is a constant of the loss, so the
            // numeric oracle evaluates with targets frozen at the center
            let decoded0: Vec<DecodedGrid> =
                raws.iter().map(|r| decode_grid(r, &cfg)).collect();
            let targets = objectness_targets(&decoded0, &asg);
            let eval = |raws: &[RawGridPrediction]| {
                let decoded: Vec<DecodedGrid> =
                    raws.iter().map(|r| decode_grid(r, &cfg)).collect();
                total_loss_frozen_targets(&decoded, &asg, variant, &targets)
            };
            for level in 0..3 {
                for r in 0..2 {
                    for c in 0..2 {
                        for k in 0..5 {
                            let orig = raws[level].values[(r, c, k)];
                            raws[level].values[(r, c, k)] = orig + h;
                            let hi = eval(&raws);
                            raws[level].values[(r, c, k)] = orig - h;
                            let lo = eval(&raws);
                            raws[level].values[(r, c, k)] = orig;
                            let numeric = (hi - lo) / (2.0 * h);
                            let analytic = grads[level][(r, c, k)];
                            let rel = (analytic - numeric).abs()
                                / analytic.abs().max(numeric.abs()).max(1e-6);
                            max_rel = max_rel.max(rel);
                            assert!(
                                rel <= 1e-3,
                                "trial {trial} {variant:?} {mode:?} logit ({level},{r},{c},{k}): \
                                 analytic {analytic} vs numeric {numeric} (rel {rel:.3e})"
                            );
                        }
                    }
                }
            }
        }
        assert!(max_rel <= 1e-3);
    }
}
