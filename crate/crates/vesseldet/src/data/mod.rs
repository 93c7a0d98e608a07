//! Dataset ingestion and geometric preprocessing.
//!
//! On-disk layout: `root/images/*.png|jpg|tif` with matching
//! `root/labels/<stem>.txt` files of normalized `cx cy w h` lines (an
//! optional leading class index is accepted and must be 0), plus an optional
//! `root/split.txt` mapping stems to `train`/`val`.

mod letterbox;
mod mosaic;
pub mod synth;

pub use letterbox::{letterbox_image, LetterboxTransform};
pub use mosaic::{mosaic_augment, mosaic_augment_at};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{BBox, Space};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing directory {0}")]
    MissingDir(PathBuf),
    #[error("no images found under {0}")]
    NoImages(PathBuf),
    #[error("{path}:{line}: malformed label: {msg}")]
    MalformedLabel {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: malformed split entry: {msg}")]
    MalformedSplit {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("image error for {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One annotated image: boxes are normalized to `[0, 1]` of the image.
#[derive(Debug, Clone)]
pub struct AnnotationRecord {
    pub stem: String,
    pub image_path: PathBuf,
    pub boxes: Vec<BBox>,
    pub image_w: u32,
    pub image_h: u32,
}

impl AnnotationRecord {
    /// Boxes converted to pixel coordinates of the source image.
    pub fn pixel_boxes(&self) -> Vec<BBox> {
        self.boxes
            .iter()
            .map(|b| {
                BBox::new(
                    b.cx * self.image_w as f64,
                    b.cy * self.image_h as f64,
                    b.w * self.image_w as f64,
                    b.h * self.image_h as f64,
                    Space::Pixel,
                )
            })
            .collect()
    }
}

const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

/// Clip a normalized box to `[0, 1]` by its corners.
fn clip_normalized(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
    let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
    let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
    let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
    BBox::from_corners(x1, y1, x2, y2, Space::Normalized)
}

/// Parse one label line: `cx cy w h` or `class cx cy w h` with class 0.
fn parse_label_line(line: &str, path: &Path, line_no: usize) -> Result<Option<BBox>, DataError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.is_empty() {
        return Ok(None);
    }
    let malformed = |msg: String| DataError::MalformedLabel {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let values: &[&str] = match tokens.len() {
        4 => &tokens,
        5 => {
            if tokens[0] != "0" {
                return Err(malformed(format!(
                    "class index must be 0 for the single-class format, got `{}`",
                    tokens[0]
                )));
            }
            &tokens[1..]
        }
        n => {
            return Err(malformed(format!(
                "expected 4 values (or 5 with a leading class), got {n}"
            )))
        }
    };
    let mut parsed = [0.0f64; 4];
    for (slot, tok) in parsed.iter_mut().zip(values) {
        *slot = tok
            .parse::<f64>()
            .map_err(|e| malformed(format!("`{tok}`: {e}")))?;
        if !slot.is_finite() {
            return Err(malformed(format!("`{tok}` is not finite")));
        }
    }
    if parsed[2] < 0.0 || parsed[3] < 0.0 {
        return Err(malformed("negative box extent".to_string()));
    }
    Ok(Some(clip_normalized(
        parsed[0], parsed[1], parsed[2], parsed[3],
    )))
}

/// Parse a whole label file into normalized boxes.
pub fn parse_label_file(path: &Path) -> Result<Vec<BBox>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(b) = parse_label_line(line, path, i + 1)? {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

/// Load every annotated image under `root`, ordered by stem. Images without
/// a label file produce a record with zero boxes and a warning.
pub fn load_dataset(root: &Path) -> Result<Vec<AnnotationRecord>, DataError> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    if !images_dir.is_dir() {
        return Err(DataError::MissingDir(images_dir));
    }
    if !labels_dir.is_dir() {
        return Err(DataError::MissingDir(labels_dir));
    }

    let mut stems: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&images_dir).map_err(io_err(&images_dir))? {
        let entry = entry.map_err(io_err(&images_dir))?;
        let path = entry.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        stems.push((stem, path));
    }
    if stems.is_empty() {
        return Err(DataError::NoImages(images_dir));
    }
    stems.sort();

    let mut records = Vec::with_capacity(stems.len());
    for (stem, image_path) in stems {
        let (image_w, image_h) =
            image::image_dimensions(&image_path).map_err(|e| DataError::Image {
                path: image_path.clone(),
                msg: e.to_string(),
            })?;
        let label_path = labels_dir.join(format!("{stem}.txt"));
        let boxes = if label_path.is_file() {
            parse_label_file(&label_path)?
        } else {
            log::warn!("{stem}: no label file, treating as empty");
            Vec::new()
        };
        records.push(AnnotationRecord {
            stem,
            image_path,
            boxes,
            image_w,
            image_h,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Read `root/split.txt` (`<stem> train|val` per line) if present.
pub fn load_split(root: &Path) -> Result<Option<BTreeMap<String, Split>>, DataError> {
    let path = root.join("split.txt");
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 2 {
            return Err(DataError::MalformedSplit {
                path: path.clone(),
                line: i + 1,
                msg: format!("expected `<stem> train|val`, got `{line}`"),
            });
        }
        let split = match tokens[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => {
                return Err(DataError::MalformedSplit {
                    path: path.clone(),
                    line: i + 1,
                    msg: format!("unknown split `{other}`"),
                })
            }
        };
        map.insert(tokens[0].to_string(), split);
    }
    Ok(Some(map))
}

/// Split records into (train, val). If `split.txt` provided a map it wins;
/// otherwise the split is a pure function of the sorted stems and the seed.
pub fn split_records(
    records: Vec<AnnotationRecord>,
    explicit: Option<&BTreeMap<String, Split>>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<AnnotationRecord>, Vec<AnnotationRecord>) {
    if let Some(map) = explicit {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for r in records {
            match map.get(&r.stem) {
                Some(Split::Val) => val.push(r),
                Some(Split::Train) => train.push(r),
                None => {
                    log::warn!("{}: not in split.txt, assigning to train", r.stem);
                    train.push(r);
                }
            }
        }
        return (train, val);
    }
    let n_val = ((records.len() as f64) * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let val_idx: std::collections::BTreeSet<usize> = order.into_iter().take(n_val).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        if val_idx.contains(&i) {
            val.push(r);
        } else {
            train.push(r);
        }
    }
    (train, val)
}

/// RGB image to a `(3, h, w)` float tensor in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut t = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t[(c, y as usize, x as usize)] = p.0[c] as f32 / 255.0;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn write(path: &Path, content: &str) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, content).unwrap();
    }

    fn gray_png(path: &Path, w: u32, h: u32) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(w, h, image::Rgb([80, 80, 80]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn loads_and_converts_labels() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        gray_png(&root.join("images/a.png"), 1000, 500);
        write(&root.join("labels/a.txt"), "0.5 0.5 0.1 0.2\n");
        gray_png(&root.join("images/b.png"), 64, 64);
        write(&root.join("labels/b.txt"), "");
        gray_png(&root.join("images/c.png"), 64, 64);
        write(&root.join("labels/c.txt"), "0 0.5 0.5 0.1 0.2\n");

        let recs = load_dataset(root).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].stem, "a");
        let px = recs[0].pixel_boxes();
        assert_abs_diff_eq!(px[0].cx, 500.0, epsilon = 1e-9);
        assert_abs_diff_eq!(px[0].cy, 250.0, epsilon = 1e-9);
        assert_abs_diff_eq!(px[0].w, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(px[0].h, 100.0, epsilon = 1e-9);
        // empty labels file: zero boxes
        assert!(recs[1].boxes.is_empty());
        // leading class column accepted
        assert_eq!(recs[2].boxes.len(), 1);
        assert_abs_diff_eq!(recs[2].boxes[0].cx, 0.5);
    }

    #[test]
    fn malformed_label_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        gray_png(&root.join("images/a.png"), 64, 64);
        write(&root.join("labels/a.txt"), "0.5 0.5 0.1 0.2\nnot a box\n");
        let err = load_dataset(root).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.txt"), "{msg}");
        assert!(msg.contains(":2"), "{msg}");
        // and a nonzero class index is rejected
        write(&root.join("labels/a.txt"), "1 0.5 0.5 0.1 0.2\n");
        assert!(load_dataset(root).is_err());
    }

    #[test]
    fn boxes_are_clipped_into_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        gray_png(&root.join("images/a.png"), 64, 64);
        write(&root.join("labels/a.txt"), "0.02 0.5 0.2 0.4\n");
        let recs = load_dataset(root).unwrap();
        let b = recs[0].boxes[0];
        let (x1, y1, x2, y2) = b.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
    }

    #[test]
    fn split_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for i in 0..10 {
            gray_png(&root.join(format!("images/img{i}.png")), 32, 32);
            write(&root.join(format!("labels/img{i}.txt")), "");
        }
        let recs = load_dataset(root).unwrap();
        let (t1, v1) = split_records(recs.clone(), None, 0.3, 9);
        let (t2, v2) = split_records(recs, None, 0.3, 9);
        assert_eq!(v1.len(), 3);
        let stems = |v: &[AnnotationRecord]| v.iter().map(|r| r.stem.clone()).collect::<Vec<_>>();
        assert_eq!(stems(&t1), stems(&t2));
        assert_eq!(stems(&v1), stems(&v2));
    }

    #[test]
    fn split_file_wins() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        gray_png(&root.join("images/a.png"), 32, 32);
        gray_png(&root.join("images/b.png"), 32, 32);
        write(&root.join("labels/a.txt"), "");
        write(&root.join("labels/b.txt"), "");
        write(&root.join("split.txt"), "a train\nb val\n");
        let recs = load_dataset(root).unwrap();
        let map = load_split(root).unwrap().unwrap();
        let (train, val) = split_records(recs, Some(&map), 0.5, 0);
        assert_eq!(train.len(), 1);
        assert_eq!(train[0].stem, "a");
        assert_eq!(val[0].stem, "b");
    }
}
