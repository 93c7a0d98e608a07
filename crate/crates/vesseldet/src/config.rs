//! Flat key-value run configuration (TOML) covering model, training and
//! dataset settings. Unknown keys are rejected by name; `--override key=value`
//! entries are merged before parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::IouVariant;
use crate::model::{BackboneId, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("config error: {0}")]
    Parse(String),
    #[error("invalid override `{0}` (expected key=value)")]
    BadOverride(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root holding images/, labels/ and optionally split.txt.
    pub dataset_root: String,
    /// Output directory for checkpoints and logs.
    pub out_dir: String,
    /// Square model input edge, divisible by 32.
    pub input_size: usize,
    pub backbone: BackboneId,
    /// Maximum decodable box width as a fraction of the input; 0 derives it
    /// from the training data (largest box extent plus a 10% margin).
    pub max_w_frac: f64,
    pub max_h_frac: f64,
    /// Set to false to lift the maximum-size constraint (both fractions 1).
    pub max_size_constraint: bool,
    pub neck_width_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    /// 0, 2 or 4 neighbor cells receive duplicated targets.
    pub neighbor_mode: u8,
    pub iou_variant: IouVariant,
    pub mosaic: bool,
    pub seed: u64,
    /// Used when the dataset has no split.txt.
    pub val_fraction: f64,
    pub eval_conf_sweep: Vec<f64>,
    pub val_nms_iou: f64,
    pub val_iou_thresh: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset_root: String::new(),
            out_dir: "runs/train".into(),
            input_size: 2048,
            backbone: BackboneId::Yolov7Tiny,
            max_w_frac: 0.0,
            max_h_frac: 0.0,
            max_size_constraint: true,
            neck_width_multiplier: 1.0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            accumulation_steps: t.accumulation_steps,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            warmup_epochs: t.warmup_epochs,
            neighbor_mode: t.neighbor_mode,
            iou_variant: t.iou_variant,
            mosaic: t.mosaic,
            seed: t.seed,
            val_fraction: 0.2,
            eval_conf_sweep: t.eval_conf_sweep,
            val_nms_iou: t.val_nms_iou,
            val_iou_thresh: t.val_iou_thresh,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let (mw, mh) = if self.max_size_constraint {
            (self.max_w_frac, self.max_h_frac)
        } else {
            (1.0, 1.0)
        };
        ModelConfig {
            input_h: self.input_size,
            input_w: self.input_size,
            max_w_frac: mw,
            max_h_frac: mh,
            backbone: self.backbone,
            level_strides: [8, 16, 32],
            neck_width_multiplier: self.neck_width_multiplier,
            num_levels: 3,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            accumulation_steps: self.accumulation_steps,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            warmup_epochs: self.warmup_epochs,
            neighbor_mode: self.neighbor_mode,
            iou_variant: self.iou_variant,
            input_size: self.input_size,
            mosaic: self.mosaic,
            seed: self.seed,
            eval_conf_sweep: self.eval_conf_sweep.clone(),
            val_nms_iou: self.val_nms_iou,
            val_iou_thresh: self.val_iou_thresh,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError::Parse(msg));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return err(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            ));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return err("batch_size and accumulation_steps must be >= 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be >= 1".into());
        }
        if self.learning_rate <= 0.0 {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be non-negative".into());
        }
        if ![0u8, 2, 4].contains(&self.neighbor_mode) {
            return err(format!(
                "neighbor_mode must be 0, 2 or 4, got {}",
                self.neighbor_mode
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.eval_conf_sweep.is_empty()
            || self
                .eval_conf_sweep
                .iter()
                .any(|t| !(0.0..1.0).contains(t))
        {
            return err("eval_conf_sweep must be non-empty thresholds in [0, 1)".into());
        }
        if self.max_w_frac < 0.0 || self.max_w_frac > 1.0 || self.max_h_frac < 0.0 || self.max_h_frac > 1.0 {
            return err("max_w_frac/max_h_frac must be in [0, 1] (0 = derive from data)".into());
        }
        Ok(())
    }
}

/// Load a TOML config and merge `key=value` overrides (values use TOML
/// syntax, so `--override eval_conf_sweep=[0.1,0.5]` works).
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
    for ov in overrides {
        let Some((key, value)) = ov.split_once('=') else {
            return Err(ConfigError::BadOverride(ov.clone()));
        };
        let mini: toml::Table = format!("{key} = {value}")
            .parse()
            .or_else(|_| format!("{key} = \"{value}\"").parse::<toml::Table>())
            .map_err(|e| ConfigError::Parse(format!("override `{ov}`: {e}")))?;
        for (k, v) in mini {
            table.insert(k, v);
        }
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Human-readable reference of every key with its default, generated from
/// the actual `Default` values.
pub fn reference() -> String {
    let d = RunConfig::default();
    let rows: Vec<(&str, String, &str)> = vec![
        ("dataset_root", format!("{:?}", d.dataset_root), "dataset root with images/, labels/, optional split.txt (required for train)"),
        ("out_dir", format!("{:?}", d.out_dir), "output directory for checkpoint and training log"),
        ("input_size", d.input_size.to_string(), "square model input edge; must be divisible by 32"),
        ("backbone", "\"yolov7tiny-like\"".into(), "feature extractor: vgg11bn-like | yolov7tiny-like | resnet18-like"),
        ("max_w_frac", d.max_w_frac.to_string(), "max decodable box width as a fraction of input; 0 derives 1.1x the largest training box"),
        ("max_h_frac", d.max_h_frac.to_string(), "max decodable box height; 0 derives from data"),
        ("max_size_constraint", d.max_size_constraint.to_string(), "false lifts the maximum-size constraint (both fractions become 1.0)"),
        ("neck_width_multiplier", d.neck_width_multiplier.to_string(), "scales every neck/backbone channel width"),
        ("epochs", d.epochs.to_string(), "training epochs"),
        ("batch_size", d.batch_size.to_string(), "images per micro-batch"),
        ("accumulation_steps", d.accumulation_steps.to_string(), "micro-batches accumulated per optimizer update"),
        ("learning_rate", d.learning_rate.to_string(), "peak SGD learning rate"),
        ("weight_decay", d.weight_decay.to_string(), "L2 penalty on convolution weights"),
        ("momentum", d.momentum.to_string(), "SGD momentum"),
        ("warmup_epochs", d.warmup_epochs.to_string(), "linear learning-rate warmup before cosine decay"),
        ("neighbor_mode", d.neighbor_mode.to_string(), "multi-positive neighbors per ground truth: 0, 2 or 4"),
        ("iou_variant", "\"giou\"".into(), "regression loss overlap: iou | giou | diou | ciou"),
        ("mosaic", d.mosaic.to_string(), "enable 2x2 mosaic augmentation"),
        ("seed", d.seed.to_string(), "seed for init, shuffling and augmentation"),
        ("val_fraction", d.val_fraction.to_string(), "validation fraction when the dataset has no split.txt"),
        ("eval_conf_sweep", format!("{:?}", d.eval_conf_sweep), "confidence thresholds swept to pick the F2 operating point"),
        ("val_nms_iou", d.val_nms_iou.to_string(), "NMS IoU threshold used during validation and prediction"),
        ("val_iou_thresh", d.val_iou_thresh.to_string(), "matching IoU threshold for the F2 metric"),
    ];
    let mut out = String::from("# Run configuration reference (TOML keys)\n#\n");
    for (key, default, doc) in rows {
        out.push_str(&format!("# {doc}\n{key} = {default}\n\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dataset_root = \"d\"\nbogus_key = 3\n").unwrap();
        let err = load_run_config(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn overrides_merge_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dataset_root = \"d\"\nepochs = 5\n").unwrap();
        let cfg = load_run_config(
            &path,
            &[
                "epochs=9".to_string(),
                "iou_variant=\"diou\"".to_string(),
                "backbone=\"resnet18-like\"".to_string(),
                "eval_conf_sweep=[0.1, 0.2]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 9);
        assert_eq!(cfg.iou_variant, IouVariant::Diou);
        assert_eq!(cfg.backbone, BackboneId::Resnet18);
        assert_eq!(cfg.eval_conf_sweep, vec![0.1, 0.2]);
    }

    #[test]
    fn bare_string_override_works_without_quotes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "").unwrap();
        let cfg = load_run_config(&path, &["dataset_root=/data/scenes".to_string()]).unwrap();
        assert_eq!(cfg.dataset_root, "/data/scenes");
    }

    #[test]
    fn validation_catches_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "input_size = 500\n").unwrap();
        assert!(load_run_config(&path, &[]).is_err());
        std::fs::write(&path, "neighbor_mode = 3\n").unwrap();
        assert!(load_run_config(&path, &[]).is_err());
    }

    #[test]
    fn constraint_toggle_sets_unity_fractions() {
        let cfg = RunConfig {
            max_size_constraint: false,
            max_w_frac: 0.2,
            max_h_frac: 0.2,
            ..RunConfig::default()
        };
        let m = cfg.model_config();
        assert_eq!(m.max_w_frac, 1.0);
        assert_eq!(m.max_h_frac, 1.0);
    }

    #[test]
    fn reference_mentions_every_key() {
        let text = reference();
        // spot checks; the reference must stay in sync with the struct
        for key in [
            "dataset_root",
            "input_size",
            "neighbor_mode",
            "iou_variant",
            "eval_conf_sweep",
            "max_size_constraint",
        ] {
            assert!(text.contains(&format!("{key} = ")), "missing {key}");
        }
    }
}
