//! Axis-aligned boxes, the IoU family (IoU, GIoU, DIoU, CIoU) and
//! non-maximum suppression.
//!
//! All measures are pure `f64` functions. Each variant also has a
//! `*_with_grad` form returning the derivative with respect to the first
//! (predicted) box in `(cx, cy, w, h)` order; the loss module chains these
//! through the decode transform.

use serde::{Deserialize, Serialize};

/// Coordinate space a box lives in. Mixing spaces in a binary operation is
/// a programming error and panics; there are no silent conversions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pixel,
    Normalized,
    Grid,
}

/// Axis-aligned rectangle in center/size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub space: Space,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, space: Space) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "negative extent: w={w} h={h}");
        Self { cx, cy, w, h, space }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, space: Space) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2);
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, space)
    }

    /// `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`.
    #[inline]
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn params(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// A box plus its objectness confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Which overlap measure drives the regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouVariant {
    Iou,
    Giou,
    Diou,
    Ciou,
}

impl IouVariant {
    pub const ALL: [IouVariant; 4] = [
        IouVariant::Iou,
        IouVariant::Giou,
        IouVariant::Diou,
        IouVariant::Ciou,
    ];

    pub fn measure(&self, a: &BBox, b: &BBox) -> f64 {
        match self {
            IouVariant::Iou => iou(a, b),
            IouVariant::Giou => giou(a, b),
            IouVariant::Diou => diou(a, b),
            IouVariant::Ciou => ciou(a, b),
        }
    }

    /// Measure plus gradient with respect to `pred`'s `(cx, cy, w, h)`.
    pub fn measure_with_grad(&self, pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
        check_space(pred, gt);
        match self {
            IouVariant::Iou => iou_grad_raw(pred.params(), gt.params()),
            IouVariant::Giou => giou_grad_raw(pred.params(), gt.params()),
            IouVariant::Diou => diou_grad_raw(pred.params(), gt.params()),
            IouVariant::Ciou => ciou_grad_raw(pred.params(), gt.params()),
        }
    }
}

impl std::fmt::Display for IouVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            IouVariant::Iou => "iou",
            IouVariant::Giou => "giou",
            IouVariant::Diou => "diou",
            IouVariant::Ciou => "ciou",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for IouVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "iou" => Ok(IouVariant::Iou),
            "giou" => Ok(IouVariant::Giou),
            "diou" => Ok(IouVariant::Diou),
            "ciou" => Ok(IouVariant::Ciou),
            other => Err(format!("unknown iou variant `{other}` (iou|giou|diou|ciou)")),
        }
    }
}

#[inline]
fn check_space(a: &BBox, b: &BBox) {
    assert_eq!(
        a.space, b.space,
        "coordinate space mismatch: {:?} vs {:?}",
        a.space, b.space
    );
}

/// Plain intersection-over-union in [0, 1]. Two zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    check_space(a, b);
    iou_grad_raw(a.params(), b.params()).0
}

/// GIoU in (-1, 1]: IoU minus the enclosing-box penalty.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    check_space(a, b);
    giou_grad_raw(a.params(), b.params()).0
}

/// DIoU in (-1, 1]: IoU minus the normalized center-distance penalty.
pub fn diou(a: &BBox, b: &BBox) -> f64 {
    check_space(a, b);
    diou_grad_raw(a.params(), b.params()).0
}

/// CIoU: DIoU minus the aspect-ratio consistency term.
pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    check_space(a, b);
    ciou_grad_raw(a.params(), b.params()).0
}

const EPS: f64 = 1e-12;

/// Shared forward intermediates for the IoU family.
///
/// `d_*` entries are derivatives with respect to the predicted box
/// parameters `(cx, cy, w, h)`.
struct Overlap {
    iou: f64,
    d_iou: [f64; 4],
    union: f64,
    d_union: [f64; 4],
    degenerate: bool,
    // corners of pred and gt
    p: [f64; 4], // x1, y1, x2, y2
    g: [f64; 4],
}

fn overlap(pred: [f64; 4], gt: [f64; 4]) -> Overlap {
    let [pcx, pcy, pw, ph] = pred;
    let [gcx, gcy, gw, gh] = gt;
    let p = [pcx - pw / 2.0, pcy - ph / 2.0, pcx + pw / 2.0, pcy + ph / 2.0];
    let g = [gcx - gw / 2.0, gcy - gh / 2.0, gcx + gw / 2.0, gcy + gh / 2.0];

    // d corner / d (cx, cy, w, h): x1 -> (1, 0, -1/2, 0), x2 -> (1, 0, 1/2, 0)
    let xl = p[0].max(g[0]);
    let xr = p[2].min(g[2]);
    let yl = p[1].max(g[1]);
    let yr = p[3].min(g[3]);
    let iw = (xr - xl).max(0.0);
    let ih = (yr - yl).max(0.0);
    let inter = iw * ih;

    // active-side indicators for the intersection edges
    let dxl_dx1 = if p[0] >= g[0] { 1.0 } else { 0.0 };
    let dxr_dx2 = if p[2] <= g[2] { 1.0 } else { 0.0 };
    let dyl_dy1 = if p[1] >= g[1] { 1.0 } else { 0.0 };
    let dyr_dy2 = if p[3] <= g[3] { 1.0 } else { 0.0 };

    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        // d inter / d iw = ih, d iw / d xl = -1, d iw / d xr = 1
        let d_iw = [
            dxr_dx2 - dxl_dx1,        // cx: x1 and x2 both move with cx
            0.0,
            0.5 * dxr_dx2 + 0.5 * dxl_dx1, // w: x2 += w/2, x1 -= w/2
            0.0,
        ];
        let d_ih = [
            0.0,
            dyr_dy2 - dyl_dy1,
            0.0,
            0.5 * dyr_dy2 + 0.5 * dyl_dy1,
        ];
        for k in 0..4 {
            d_inter[k] = ih * d_iw[k] + iw * d_ih[k];
        }
    }

    let area_p = pw * ph;
    let area_g = gw * gh;
    let union = area_p + area_g - inter;
    let d_area_p = [0.0, 0.0, ph, pw];
    let mut d_union = [0.0; 4];
    for k in 0..4 {
        d_union[k] = d_area_p[k] - d_inter[k];
    }

    if union <= EPS {
        // both boxes degenerate: define IoU = 0 to keep losses finite
        return Overlap {
            iou: 0.0,
            d_iou: [0.0; 4],
            union: 0.0,
            d_union: [0.0; 4],
            degenerate: true,
            p,
            g,
        };
    }

    let iou = inter / union;
    let mut d_iou = [0.0; 4];
    for k in 0..4 {
        d_iou[k] = (d_inter[k] * union - inter * d_union[k]) / (union * union);
    }
    Overlap {
        iou,
        d_iou,
        union,
        d_union,
        degenerate: false,
        p,
        g,
    }
}

/// Enclosing-box width/height and their derivatives w.r.t. pred params.
fn enclosing(o: &Overlap) -> (f64, [f64; 4], f64, [f64; 4]) {
    let cw = o.p[2].max(o.g[2]) - o.p[0].min(o.g[0]);
    let ch = o.p[3].max(o.g[3]) - o.p[1].min(o.g[1]);
    let right = if o.p[2] >= o.g[2] { 1.0 } else { 0.0 };
    let left = if o.p[0] <= o.g[0] { 1.0 } else { 0.0 };
    let top = if o.p[1] <= o.g[1] { 1.0 } else { 0.0 };
    let bot = if o.p[3] >= o.g[3] { 1.0 } else { 0.0 };
    let d_cw = [right - left, 0.0, 0.5 * right + 0.5 * left, 0.0];
    let d_ch = [0.0, bot - top, 0.0, 0.5 * bot + 0.5 * top];
    (cw, d_cw, ch, d_ch)
}

fn iou_grad_raw(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let o = overlap(pred, gt);
    (o.iou, o.d_iou)
}

fn giou_grad_raw(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let o = overlap(pred, gt);
    if o.degenerate {
        return (0.0, [0.0; 4]);
    }
    let (cw, d_cw, ch, d_ch) = enclosing(&o);
    let c_area = cw * ch;
    if c_area <= EPS {
        return (o.iou, o.d_iou);
    }
    // penalty = (C - U) / C = 1 - U/C
    let penalty = 1.0 - o.union / c_area;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_c = d_cw[k] * ch + cw * d_ch[k];
        let d_penalty = (o.union * d_c - c_area * o.d_union[k]) / (c_area * c_area);
        grad[k] = o.d_iou[k] - d_penalty;
    }
    (o.iou - penalty, grad)
}

fn diou_grad_raw(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let o = overlap(pred, gt);
    if o.degenerate {
        return (0.0, [0.0; 4]);
    }
    let (cw, d_cw, ch, d_ch) = enclosing(&o);
    let c2 = cw * cw + ch * ch;
    if c2 <= EPS {
        // coincident degenerate boxes: center term defined as 0
        return (o.iou, o.d_iou);
    }
    let dx = pred[0] - gt[0];
    let dy = pred[1] - gt[1];
    let rho2 = dx * dx + dy * dy;
    let term = rho2 / c2;
    let d_rho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_c2 = 2.0 * cw * d_cw[k] + 2.0 * ch * d_ch[k];
        let d_term = (d_rho2[k] * c2 - rho2 * d_c2) / (c2 * c2);
        grad[k] = o.d_iou[k] - d_term;
    }
    (o.iou - term, grad)
}

fn ciou_grad_raw(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let (diou_val, diou_grad) = diou_grad_raw(pred, gt);
    let (iou_val, iou_grad) = iou_grad_raw(pred, gt);
    let [_, _, pw, ph] = pred;
    let [_, _, gw, gh] = gt;
    if pw * ph <= EPS && gw * gh <= EPS {
        return (0.0, [0.0; 4]);
    }

    // atan2 keeps the aspect term finite for zero extents
    let ang_diff = gw.atan2(gh) - pw.atan2(ph);
    let v = (4.0 / (std::f64::consts::PI * std::f64::consts::PI)) * ang_diff * ang_diff;
    let s = (1.0 - iou_val) + v;
    if s <= EPS {
        // identical boxes: the trade-off term vanishes to third order
        return (diou_val, diou_grad);
    }
    let alpha = v / s;

    let denom = (pw * pw + ph * ph).max(EPS);
    let d_atan_dw = ph / denom;
    let d_atan_dh = -pw / denom;
    let coeff = -(8.0 / (std::f64::consts::PI * std::f64::consts::PI)) * ang_diff;
    let d_v = [0.0, 0.0, coeff * d_atan_dw, coeff * d_atan_dh];

    // alpha is differentiated exactly; some published implementations hold it
    // constant during backprop, which would not match finite differences.
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_alpha = (d_v[k] * (1.0 - iou_val) + v * iou_grad[k]) / (s * s);
        grad[k] = diou_grad[k] - (d_alpha * v + alpha * d_v[k]);
    }
    (diou_val - alpha * v, grad)
}

/// Classical greedy non-maximum suppression.
///
/// Detections below `conf_thresh` are dropped; the survivors are visited in
/// descending confidence (ties broken by input order) and kept unless they
/// overlap an already-kept detection with IoU strictly above `iou_thresh`.
/// The result is sorted by descending confidence.
pub fn nms(dets: &[Detection], iou_thresh: f64, conf_thresh: f64) -> Vec<Detection> {
    assert!(
        iou_thresh > 0.0 && iou_thresh < 1.0,
        "iou_thresh must be in (0, 1), got {iou_thresh}"
    );
    assert!(
        (0.0..1.0).contains(&conf_thresh),
        "conf_thresh must be in [0, 1), got {conf_thresh}"
    );
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= conf_thresh)
        .collect();
    // stable sort keeps input order for equal confidences
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("confidence must not be NaN")
    });

    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| iou(&k.bbox, &candidate.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*candidate);
        }
    }
    kept
}
