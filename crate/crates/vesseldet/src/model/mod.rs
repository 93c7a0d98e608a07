//! Detector model: backbone, neck, head, and the bounded box decode.
//!
//! The neck follows the compact three-output feature-pyramid wiring of the
//! YOLO-tiny family: lateral 1x1 reductions, nearest-neighbor upsampling with
//! concatenation on the way up, max-pool downsampling with concatenation on
//! the way back down, and "b" concatenation blocks (parallel 3x3 + 1x1
//! conv-norm-ReLU branches) doing the mixing. Each head level is one
//! convolutional block plus a single output convolution with 5 channels:
//! center x, center y, width, height, confidence. Single class, no class
//! logits.

mod checkpoint;
mod decode;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use decode::{
    decode, decode_grid, encode_center, predict_from_raw, sigmoid, DecodedGrid,
    RawGridPrediction,
};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Graph, GraphBuilder, Mode, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "vgg11bn-like")]
    Vgg11Bn,
    #[serde(rename = "yolov7tiny-like")]
    Yolov7Tiny,
    #[serde(rename = "resnet18-like")]
    Resnet18,
}

impl std::str::FromStr for BackboneId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vgg11bn-like" => Ok(BackboneId::Vgg11Bn),
            "yolov7tiny-like" => Ok(BackboneId::Yolov7Tiny),
            "resnet18-like" => Ok(BackboneId::Resnet18),
            other => Err(format!(
                "unknown backbone `{other}` (vgg11bn-like|yolov7tiny-like|resnet18-like)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Maximum decodable box width as a fraction of the input width.
    pub max_w_frac: f64,
    /// Maximum decodable box height as a fraction of the input height.
    pub max_h_frac: f64,
    pub backbone: BackboneId,
    pub level_strides: [usize; 3],
    pub neck_width_multiplier: f64,
    pub num_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
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
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let max_stride = *self.level_strides.iter().max().unwrap();
        if self.input_h == 0 || self.input_w == 0 {
            return Err(ModelError::Config("input size must be positive".into()));
        }
        if self.input_h % max_stride != 0 || self.input_w % max_stride != 0 {
            return Err(ModelError::Config(format!(
                "input {}x{} not divisible by largest stride {max_stride}",
                self.input_w, self.input_h
            )));
        }
        for (name, v) in [("max_w_frac", self.max_w_frac), ("max_h_frac", self.max_h_frac)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ModelError::Config(format!(
                    "{name} must be in (0, 1], got {v}"
                )));
            }
        }
        if self.num_levels != 3 {
            return Err(ModelError::Config(format!(
                "exactly 3 pyramid levels are supported, got {}",
                self.num_levels
            )));
        }
        if self.neck_width_multiplier <= 0.0 {
            return Err(ModelError::Config(
                "neck_width_multiplier must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Grid size `(rows, cols)` of pyramid level `i`.
    pub fn grid_dims(&self, level: usize) -> (usize, usize) {
        let s = self.level_strides[level];
        (self.input_h / s, self.input_w / s)
    }
}

/// The detector: immutable during inference, mutated by the trainer.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub graph: Graph,
}

/// Round a base width by the multiplier to a multiple of 8 (minimum 8) so
/// b-block branches stay even.
fn scaled(base: usize, mult: f64) -> usize {
    let w = (base as f64 * mult / 8.0).round() as usize * 8;
    w.max(8)
}

const CONF_BIAS_INIT: f32 = -4.595_12; // sigmoid^-1(0.01)

struct Features {
    c3: NodeId,
    c4: NodeId,
    c5: NodeId,
}

fn backbone_yolov7tiny(b: &mut GraphBuilder, input: NodeId, mult: f64) -> Features {
    let s0 = b.cbr("bb.stem0", input, scaled(32, mult), 3, 2);
    let s1 = b.cbr("bb.stem1", s0, scaled(64, mult), 3, 2);
    let s4 = b.bblock("bb.s4.b0", s1, scaled(64, mult));
    let p8 = b.maxpool("bb.s8.pool", s4);
    let s8a = b.bblock("bb.s8.b0", p8, scaled(128, mult));
    let c3 = b.bblock("bb.s8.b1", s8a, scaled(128, mult));
    let p16 = b.maxpool("bb.s16.pool", c3);
    let s16a = b.bblock("bb.s16.b0", p16, scaled(256, mult));
    let c4 = b.bblock("bb.s16.b1", s16a, scaled(256, mult));
    let p32 = b.maxpool("bb.s32.pool", c4);
    let s32a = b.bblock("bb.s32.b0", p32, scaled(512, mult));
    let s32b = b.bblock("bb.s32.b1", s32a, scaled(512, mult));
    let c5 = b.bblock("bb.s32.b2", s32b, scaled(512, mult));
    Features { c3, c4, c5 }
}

fn backbone_vgg11bn(b: &mut GraphBuilder, input: NodeId, mult: f64) -> Features {
    let v1 = b.cbr("bb.s1.c0", input, scaled(64, mult), 3, 1);
    let p2 = b.maxpool("bb.s2.pool", v1);
    let v2 = b.cbr("bb.s2.c0", p2, scaled(128, mult), 3, 1);
    let p4 = b.maxpool("bb.s4.pool", v2);
    let v3a = b.cbr("bb.s4.c0", p4, scaled(256, mult), 3, 1);
    let v3b = b.cbr("bb.s4.c1", v3a, scaled(256, mult), 3, 1);
    let p8 = b.maxpool("bb.s8.pool", v3b);
    let v4a = b.cbr("bb.s8.c0", p8, scaled(512, mult), 3, 1);
    let c3 = b.cbr("bb.s8.c1", v4a, scaled(512, mult), 3, 1);
    let p16 = b.maxpool("bb.s16.pool", c3);
    let v5a = b.cbr("bb.s16.c0", p16, scaled(512, mult), 3, 1);
    let c4 = b.cbr("bb.s16.c1", v5a, scaled(512, mult), 3, 1);
    let c5 = b.maxpool("bb.s32.pool", c4);
    Features { c3, c4, c5 }
}

fn basic_block(b: &mut GraphBuilder, name: &str, src: NodeId, c_out: usize, stride: usize) -> NodeId {
    let conv1 = b.conv(&format!("{name}.conv1"), src, c_out, 3, stride);
    let norm1 = b.norm(&format!("{name}.norm1"), conv1);
    let relu1 = b.relu(&format!("{name}.relu1"), norm1);
    let conv2 = b.conv(&format!("{name}.conv2"), relu1, c_out, 3, 1);
    let norm2 = b.norm(&format!("{name}.norm2"), conv2);
    let skip = if stride != 1 || b.channels(src) != c_out {
        let sconv = b.conv(&format!("{name}.skip.conv"), src, c_out, 1, stride);
        b.norm(&format!("{name}.skip.norm"), sconv)
    } else {
        src
    };
    let sum = b.add(&format!("{name}.add"), norm2, skip);
    b.relu(&format!("{name}.relu2"), sum)
}

fn backbone_resnet18(b: &mut GraphBuilder, input: NodeId, mult: f64) -> Features {
    let stem = b.cbr("bb.stem", input, scaled(64, mult), 7, 2);
    let p4 = b.maxpool("bb.s4.pool", stem);
    let l1a = basic_block(b, "bb.layer1.0", p4, scaled(64, mult), 1);
    let l1b = basic_block(b, "bb.layer1.1", l1a, scaled(64, mult), 1);
    let l2a = basic_block(b, "bb.layer2.0", l1b, scaled(128, mult), 2);
    let c3 = basic_block(b, "bb.layer2.1", l2a, scaled(128, mult), 1);
    let l3a = basic_block(b, "bb.layer3.0", c3, scaled(256, mult), 2);
    let c4 = basic_block(b, "bb.layer3.1", l3a, scaled(256, mult), 1);
    let l4a = basic_block(b, "bb.layer4.0", c4, scaled(512, mult), 2);
    let c5 = basic_block(b, "bb.layer4.1", l4a, scaled(512, mult), 1);
    Features { c3, c4, c5 }
}

impl Model {
    /// Build a randomly initialized detector. The output-convolution
    /// confidence bias starts at sigmoid^-1(0.01) so an untrained model
    /// predicts almost no positives.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        if cfg.level_strides != [8, 16, 32] {
            return Err(ModelError::Config(format!(
                "backbones emit strides 8/16/32; got {:?}",
                cfg.level_strides
            )));
        }
        let mult = cfg.neck_width_multiplier;
        let mut b = GraphBuilder::new(seed);
        let input = b.input(3);
        let feats = match cfg.backbone {
            BackboneId::Yolov7Tiny => backbone_yolov7tiny(&mut b, input, mult),
            BackboneId::Vgg11Bn => backbone_vgg11bn(&mut b, input, mult),
            BackboneId::Resnet18 => backbone_resnet18(&mut b, input, mult),
        };

        // top-down path
        let p5 = b.cbr("neck.p5", feats.c5, scaled(256, mult), 1, 1);
        let u5 = b.upsample("neck.up5", p5);
        let l4 = b.cbr("neck.l4", feats.c4, scaled(256, mult), 1, 1);
        let cat4 = b.concat("neck.cat4", &[u5, l4]);
        let t4 = b.bblock("neck.t4", cat4, scaled(256, mult));
        let t4r = b.cbr("neck.t4r", t4, scaled(128, mult), 1, 1);
        let u4 = b.upsample("neck.up4", t4r);
        let l3 = b.cbr("neck.l3", feats.c3, scaled(128, mult), 1, 1);
        let cat3 = b.concat("neck.cat3", &[u4, l3]);
        let n3 = b.bblock("neck.n3", cat3, scaled(128, mult));
        // bottom-up path
        let d3 = b.maxpool("neck.d3", n3);
        let cat4b = b.concat("neck.cat4b", &[d3, t4]);
        let n4 = b.bblock("neck.n4", cat4b, scaled(256, mult));
        let d4 = b.maxpool("neck.d4", n4);
        let cat5b = b.concat("neck.cat5b", &[d4, p5]);
        let n5 = b.bblock("neck.n5", cat5b, scaled(512, mult));

        let bias = [0.0, 0.0, 0.0, 0.0, CONF_BIAS_INIT];
        let mut outputs = Vec::new();
        for (i, neck_out) in [n3, n4, n5].into_iter().enumerate() {
            let ch = b.channels(neck_out);
            let hc = b.cbr(&format!("head.l{i}.block"), neck_out, ch, 3, 1);
            let out = b.conv_out(&format!("head.l{i}.out"), hc, 5, &bias);
            outputs.push(out);
        }
        Ok(Self {
            cfg,
            graph: b.finish(outputs),
        })
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    fn check_input(&self, images: &Tensor) -> Result<(), ModelError> {
        let (_, c, h, w) = images.dim();
        if c != 3 || h != self.cfg.input_h || w != self.cfg.input_w {
            return Err(ModelError::ShapeMismatch {
                expected: format!("(n, 3, {}, {})", self.cfg.input_h, self.cfg.input_w),
                actual: format!("{:?}", images.dim()),
            });
        }
        Ok(())
    }

    /// Inference forward pass: per image, one raw `(grid_h, grid_w, 5)` logit
    /// grid per pyramid level.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<[RawGridPrediction; 3]>, ModelError> {
        self.check_input(images)?;
        let fwd = self.graph.forward(images, Mode::Eval);
        let n = images.dim().0;
        let mut out = Vec::with_capacity(n);
        for img in 0..n {
            out.push(self.raw_grids_for_sample(&fwd, img)?);
        }
        Ok(out)
    }

    /// Extract one sample's raw grids from a forward pass over this graph.
    pub fn raw_grids_for_sample(
        &self,
        fwd: &crate::nn::ForwardPass,
        sample: usize,
    ) -> Result<[RawGridPrediction; 3], ModelError> {
        let mut grids = Vec::with_capacity(3);
        for level in 0..3 {
            let y = fwd.output(&self.graph, level);
            let (gh, gw) = self.cfg.grid_dims(level);
            let (_, c, yh, yw) = y.dim();
            if c != 5 || yh != gh || yw != gw {
                return Err(ModelError::ShapeMismatch {
                    expected: format!("(n, 5, {gh}, {gw}) at level {level}"),
                    actual: format!("{:?}", y.dim()),
                });
            }
            let plane = y.index_axis(Axis(0), sample);
            let mut values = ndarray::Array3::<f64>::zeros((gh, gw, 5));
            for ch in 0..5 {
                for r in 0..gh {
                    for cidx in 0..gw {
                        values[(r, cidx, ch)] = plane[(ch, r, cidx)] as f64;
                    }
                }
            }
            grids.push(RawGridPrediction::new(level, values));
        }
        Ok(grids.try_into().expect("exactly three levels"))
    }

    /// Full prediction pipeline: forward, decode on all levels, confidence
    /// filter and NMS. Detections are in pixel coordinates of the model
    /// input, sorted by descending confidence.
    pub fn predict(
        &self,
        image: &Tensor,
        conf_thresh: f64,
        nms_iou_thresh: f64,
    ) -> Result<Vec<crate::geometry::Detection>, ModelError> {
        let raws = self.forward(image)?;
        Ok(predict_from_raw(
            &raws[0],
            &self.cfg,
            conf_thresh,
            nms_iou_thresh,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_cfg(backbone: BackboneId) -> ModelConfig {
        ModelConfig {
            input_h: 128,
            input_w: 128,
            backbone,
            neck_width_multiplier: 0.25,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn grid_shapes_follow_strides() {
        for (input, expect) in [(2048usize, [256usize, 128, 64]), (512, [64, 32, 16])] {
            let cfg = ModelConfig {
                input_h: input,
                input_w: input,
                ..ModelConfig::default()
            };
            for level in 0..3 {
                assert_eq!(cfg.grid_dims(level), (expect[level], expect[level]));
            }
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = ModelConfig {
            input_h: 500,
            input_w: 500,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn param_count_matches_reference_scale() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg, 0).unwrap();
        let count = model.param_count() as f64;
        let reference = 9.77e6;
        assert!(
            (count - reference).abs() / reference < 0.10,
            "yolov7tiny-like detector has {count} params, expected within 10% of {reference}"
        );
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = Model::new(small_cfg(BackboneId::Yolov7Tiny), 1).unwrap();
        // all-zero image: finite logits
        let x = Array4::zeros((1, 3, 128, 128));
        let raws = model.forward(&x).unwrap();
        assert!(raws[0]
            .iter()
            .all(|g| g.values.iter().all(|v| v.is_finite())));
        // batch of two: leading dim 2
        let x2 = Array4::from_shape_fn((2, 3, 128, 128), |(n, c, y, x)| {
            ((n + c + y + x) % 7) as f32 / 7.0
        });
        let raws2 = model.forward(&x2).unwrap();
        assert_eq!(raws2.len(), 2);
        // identical inputs give bit-identical outputs
        let a = model.forward(&x2).unwrap();
        for (ga, gb) in a[0].iter().zip(raws2[0].iter()) {
            assert_eq!(ga.values, gb.values);
        }
        // shape error names dims
        let bad = Array4::zeros((1, 3, 64, 64));
        let err = model.forward(&bad).unwrap_err();
        assert!(err.to_string().contains("128"));
    }

    #[test]
    fn neck_output_shapes_invariant_to_backbone() {
        let mut dims: Vec<Vec<(usize, usize, usize, usize)>> = Vec::new();
        for backbone in [BackboneId::Yolov7Tiny, BackboneId::Vgg11Bn, BackboneId::Resnet18] {
            let model = Model::new(small_cfg(backbone), 1).unwrap();
            let x = Array4::zeros((1, 3, 128, 128));
            let fwd = model.graph.forward(&x, crate::nn::Mode::Eval);
            dims.push(
                (0..3)
                    .map(|i| fwd.output(&model.graph, i).dim())
                    .collect(),
            );
        }
        assert_eq!(dims[0], dims[1]);
        assert_eq!(dims[0], dims[2]);
    }
}
