//! COCO-style annotation ingestion and the small-box filter.
//!
//! Parsing clamps boxes to image bounds, drops crowd and degenerate
//! annotations, and remaps category ids to a dense `0..n` index (the original
//! id is kept for reporting). The parsed dataset is immutable afterwards and
//! safe to share across threads.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One category with its original annotation-file id and dense index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// Original id from the annotation file.
    pub id: u64,
    /// Lowercased class name, spliced verbatim into prompts.
    pub name: String,
}

/// The ordered class vocabulary. Dense index = position in file order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<Category>", into = "Vec<Category>")]
pub struct CategorySet {
    entries: Vec<Category>,
    dense_by_original: HashMap<u64, usize>,
}

impl TryFrom<Vec<Category>> for CategorySet {
    type Error = Error;
    fn try_from(entries: Vec<Category>) -> Result<Self> {
        CategorySet::new(entries)
    }
}

impl From<CategorySet> for Vec<Category> {
    fn from(set: CategorySet) -> Self {
        set.entries
    }
}

impl PartialEq for CategorySet {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl CategorySet {
    pub fn new(entries: Vec<Category>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Format("categories array is empty".into()));
        }
        let mut dense_by_original = HashMap::new();
        for (dense, cat) in entries.iter().enumerate() {
            if cat.name.trim().is_empty() {
                return Err(Error::Format(format!("category {} has an empty name", cat.id)));
            }
            if dense_by_original.insert(cat.id, dense).is_some() {
                return Err(Error::Format(format!("duplicate category id {}", cat.id)));
            }
        }
        Ok(CategorySet {
            entries,
            dense_by_original,
        })
    }

    /// Number of classes `n`; the prompt bank holds `2n + 1` entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense id reserved for the background tier (one past the real classes).
    pub fn background_class(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }

    pub fn dense_of(&self, original_id: u64) -> Option<usize> {
        self.dense_by_original.get(&original_id).copied()
    }

    pub fn name_of(&self, dense: usize) -> Option<&str> {
        self.entries.get(dense).map(|c| c.name.as_str())
    }

    /// Dense index by class name (names are unique when the prompt bank builds).
    pub fn dense_by_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.name == name)
    }
}

/// One ground-truth box, clamped to its image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Dense class index.
    pub class_id: usize,
    /// Original category id, for reporting.
    pub category_id: u64,
    pub annotation_id: u64,
}

impl GtBox {
    pub fn rect(&self) -> Rect<f64> {
        Rect::new(self.x, self.y, self.w, self.h)
    }
}

/// One source image with its surviving annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: u64,
    pub file_path: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    pub categories: CategorySet,
}

/// Counts of annotations dropped at parse time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub total_annotations: usize,
    pub dropped_degenerate: usize,
    pub dropped_crowd: usize,
    pub dropped_after_clamp: usize,
}

impl ParseStats {
    pub fn dropped(&self) -> usize {
        self.dropped_degenerate + self.dropped_crowd + self.dropped_after_clamp
    }
}

/// Result of the <20 px size filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total_annotations: usize,
    pub removed_annotations: usize,
    /// Fraction of annotations removed.
    pub removed_fraction: f64,
    /// Fraction of images that lost at least one annotation.
    pub image_fraction: f64,
}

// Raw annotation-file shapes. Extra keys (info, licenses, segmentation) are ignored.

#[derive(Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: Vec<f64>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Parse a COCO-style JSON document into the internal dataset model.
pub fn parse_annotations(path: &Path) -> Result<(Dataset, ParseStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text)
}

pub fn parse_annotations_str(text: &str) -> Result<(Dataset, ParseStats)> {
    let doc: CocoDoc =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("annotation file: {e}")))?;

    let categories = CategorySet::new(
        doc.categories
            .into_iter()
            .map(|c| Category {
                id: c.id,
                name: c.name.to_lowercase(),
            })
            .collect(),
    )?;

    let mut images: Vec<AnnotatedImage> = Vec::with_capacity(doc.images.len());
    let mut index_of_image: HashMap<u64, usize> = HashMap::with_capacity(doc.images.len());
    for img in doc.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::Format(format!(
                "image {} has zero width or height",
                img.id
            )));
        }
        if index_of_image.insert(img.id, images.len()).is_some() {
            return Err(Error::Integrity(format!("duplicate image id {}", img.id)));
        }
        images.push(AnnotatedImage {
            image_id: img.id,
            file_path: img.file_name,
            width: img.width,
            height: img.height,
            boxes: Vec::new(),
        });
    }

    let mut stats = ParseStats {
        total_annotations: doc.annotations.len(),
        ..ParseStats::default()
    };

    for ann in doc.annotations {
        let &image_index = index_of_image.get(&ann.image_id).ok_or_else(|| {
            Error::Integrity(format!(
                "annotation {} references missing image_id {}",
                ann.id, ann.image_id
            ))
        })?;
        let class_id = categories.dense_of(ann.category_id).ok_or_else(|| {
            Error::Integrity(format!(
                "annotation {} references missing category_id {}",
                ann.id, ann.category_id
            ))
        })?;
        if ann.bbox.len() != 4 {
            return Err(Error::Format(format!(
                "annotation {} bbox has {} values, expected 4",
                ann.id,
                ann.bbox.len()
            )));
        }
        if ann.iscrowd != 0 {
            stats.dropped_crowd += 1;
            continue;
        }
        let raw = Rect::new(ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]);
        if raw.is_degenerate() {
            stats.dropped_degenerate += 1;
            continue;
        }
        let image = &mut images[image_index];
        let clamped = raw.clamp_to(image.width as f64, image.height as f64);
        if clamped.is_degenerate() {
            stats.dropped_after_clamp += 1;
            continue;
        }
        image.boxes.push(GtBox {
            x: clamped.x,
            y: clamped.y,
            w: clamped.w,
            h: clamped.h,
            class_id,
            category_id: ann.category_id,
            annotation_id: ann.id,
        });
    }

    Ok((Dataset { images, categories }, stats))
}

/// Side length below which a box counts as tiny. Boxes with *both* sides
/// under this are removed; thin or elongated boxes survive.
pub const MIN_BOX_SIDE: f64 = 20.0;

/// Remove boxes whose width and height are both under [`MIN_BOX_SIDE`].
pub fn filter_small(dataset: &Dataset) -> (Dataset, FilterStats) {
    let mut stats = FilterStats::default();
    let mut images_affected = 0usize;
    let images: Vec<AnnotatedImage> = dataset
        .images
        .iter()
        .map(|img| {
            let before = img.boxes.len();
            let boxes: Vec<GtBox> = img
                .boxes
                .iter()
                .filter(|b| !(b.w < MIN_BOX_SIDE && b.h < MIN_BOX_SIDE))
                .cloned()
                .collect();
            stats.total_annotations += before;
            let removed = before - boxes.len();
            stats.removed_annotations += removed;
            if removed > 0 {
                images_affected += 1;
            }
            AnnotatedImage {
                boxes,
                ..img.clone()
            }
        })
        .collect();
    if stats.total_annotations > 0 {
        stats.removed_fraction = stats.removed_annotations as f64 / stats.total_annotations as f64;
    }
    if !dataset.images.is_empty() {
        stats.image_fraction = images_affected as f64 / dataset.images.len() as f64;
    }
    (
        Dataset {
            images,
            categories: dataset.categories.clone(),
        },
        stats,
    )
}

/// Sidecar metadata written next to every JSONL artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub format_version: u32,
    pub categories: Vec<Category>,
    /// Provenance echo of the command that produced the artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
}

pub fn meta_path(jsonl: &Path) -> std::path::PathBuf {
    let mut name = jsonl.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    jsonl.with_file_name(name)
}

pub fn write_meta(jsonl: &Path, meta: &ManifestMeta) -> Result<()> {
    let path = meta_path(jsonl);
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(jsonl: &Path) -> Result<ManifestMeta> {
    let path = meta_path(jsonl);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write the dataset as JSONL (one image record per line) plus a meta sidecar
/// carrying the category set.
pub fn write_dataset_manifest(
    dataset: &Dataset,
    path: &Path,
    run_config: Option<serde_json::Value>,
) -> Result<()> {
    let mut out = Vec::new();
    for img in &dataset.images {
        serde_json::to_writer(&mut out, img)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    write_meta(
        path,
        &ManifestMeta {
            format_version: DATASET_FORMAT_VERSION,
            categories: dataset.categories.entries().to_vec(),
            run_config,
            notes: None,
        },
    )
}

pub fn read_dataset_manifest(path: &Path) -> Result<Dataset> {
    let meta = read_meta(path)?;
    let categories = CategorySet::new(meta.categories)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut images = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        images.push(serde_json::from_str::<AnnotatedImage>(&line)?);
    }
    Ok(Dataset { images, categories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> &'static str {
        r#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 5, "bbox": [10.0, 20.0, 30.0, 40.0], "iscrowd": 0}
            ],
            "categories": [{"id": 5, "name": "Dog"}]
        }"#
    }

    #[test]
    fn parses_minimal_document() {
        let (ds, stats) = parse_annotations_str(minimal_doc()).unwrap();
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.images[0].boxes.len(), 1);
        assert_eq!(ds.categories.len(), 1);
        assert_eq!(ds.categories.name_of(0), Some("dog"));
        assert_eq!(ds.images[0].boxes[0].class_id, 0);
        assert_eq!(ds.images[0].boxes[0].category_id, 5);
        assert_eq!(stats.dropped(), 0);
    }

    #[test]
    fn zero_width_annotation_dropped_with_count() {
        let doc = r#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 5, "bbox": [10.0, 20.0, 0.0, 40.0]},
                {"id": 2, "image_id": 1, "category_id": 5, "bbox": [10.0, 20.0, 5.0, 5.0]}
            ],
            "categories": [{"id": 5, "name": "dog"}]
        }"#;
        let (ds, stats) = parse_annotations_str(doc).unwrap();
        assert_eq!(stats.dropped_degenerate, 1);
        assert_eq!(ds.images[0].boxes.len(), 1);
    }

    #[test]
    fn crowd_annotations_dropped() {
        let doc = r#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 5, "bbox": [0, 0, 10, 10], "iscrowd": 1}
            ],
            "categories": [{"id": 5, "name": "dog"}]
        }"#;
        let (ds, stats) = parse_annotations_str(doc).unwrap();
        assert_eq!(stats.dropped_crowd, 1);
        assert!(ds.images[0].boxes.is_empty());
    }

    #[test]
    fn missing_key_is_format_error() {
        let doc = r#"{"images": [], "annotations": []}"#;
        let err = parse_annotations_str(doc).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("categories"), "message: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_image_reference_is_integrity_error() {
        let doc = r#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
            "annotations": [
                {"id": 1, "image_id": 99, "category_id": 5, "bbox": [0, 0, 10, 10]}
            ],
            "categories": [{"id": 5, "name": "dog"}]
        }"#;
        assert!(matches!(
            parse_annotations_str(doc).unwrap_err(),
            Error::Integrity(_)
        ));
    }

    #[test]
    fn boxes_clamped_to_image() {
        let doc = r#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 5, "bbox": [90.0, 70.0, 30.0, 30.0]},
                {"id": 2, "image_id": 1, "category_id": 5, "bbox": [150.0, 10.0, 30.0, 30.0]}
            ],
            "categories": [{"id": 5, "name": "dog"}]
        }"#;
        let (ds, stats) = parse_annotations_str(doc).unwrap();
        let b = &ds.images[0].boxes[0];
        assert_eq!((b.x, b.y, b.w, b.h), (90.0, 70.0, 10.0, 10.0));
        // The fully-outside box degenerates after clamping and is dropped.
        assert_eq!(stats.dropped_after_clamp, 1);
        assert_eq!(ds.images[0].boxes.len(), 1);
    }

    fn three_image_fixture() -> (Dataset, ParseStats) {
        // 3 images, 5 annotations; hand-enumerated in the asserts below.
        let doc = r#"{
            "images": [
                {"id": 1, "file_name": "a.png", "width": 640, "height": 480},
                {"id": 2, "file_name": "b.png", "width": 320, "height": 240},
                {"id": 3, "file_name": "c.png", "width": 100, "height": 100}
            ],
            "annotations": [
                {"id": 11, "image_id": 1, "category_id": 7, "bbox": [0, 0, 100, 50]},
                {"id": 12, "image_id": 1, "category_id": 9, "bbox": [10, 10, 15, 15]},
                {"id": 13, "image_id": 2, "category_id": 7, "bbox": [5, 5, 10, 300]},
                {"id": 14, "image_id": 2, "category_id": 9, "bbox": [0, 0, 19, 19]},
                {"id": 15, "image_id": 3, "category_id": 7, "bbox": [20, 19, 20, 19]}
            ],
            "categories": [{"id": 7, "name": "cat"}, {"id": 9, "name": "dog"}]
        }"#;
        parse_annotations_str(doc).unwrap()
    }

    #[test]
    fn fixture_counts_match_hand_enumeration() {
        let (ds, stats) = three_image_fixture();
        assert_eq!(ds.images.len(), 3);
        assert_eq!(stats.total_annotations, 5);
        assert_eq!(stats.dropped(), 0);
        assert_eq!(ds.images[0].boxes.len(), 2);
        assert_eq!(ds.images[1].boxes.len(), 2);
        assert_eq!(ds.images[2].boxes.len(), 1);
        // annotation 13 clamps to the 240-high image
        let b13 = &ds.images[1].boxes[0];
        assert_eq!(b13.h, 235.0);
        assert_eq!(ds.categories.dense_of(9), Some(1));
    }

    #[test]
    fn filter_small_applies_and_rule() {
        let (ds, _) = three_image_fixture();
        let (filtered, stats) = filter_small(&ds);
        // 15x15 removed (both < 20); 10x235 kept (one side >= 20);
        // 19x19 removed; 20x19 kept (width meets threshold).
        assert_eq!(stats.total_annotations, 5);
        assert_eq!(stats.removed_annotations, 2);
        assert!((stats.removed_fraction - 0.4).abs() < 1e-12);
        assert!((stats.image_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(filtered.images[0].boxes.len(), 1);
        assert_eq!(filtered.images[1].boxes.len(), 1);
        assert_eq!(filtered.images[2].boxes.len(), 1);
        for img in &filtered.images {
            for b in &img.boxes {
                assert!(b.w >= MIN_BOX_SIDE || b.h >= MIN_BOX_SIDE);
            }
        }
    }

    #[test]
    fn filter_small_is_idempotent() {
        let (ds, _) = three_image_fixture();
        let (once, _) = filter_small(&ds);
        let (twice, stats) = filter_small(&once);
        assert_eq!(once, twice);
        assert_eq!(stats.removed_annotations, 0);
    }

    #[test]
    fn manifest_round_trip_is_identity() {
        let (ds, _) = three_image_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        write_dataset_manifest(&ds, &path, None).unwrap();
        let back = read_dataset_manifest(&path).unwrap();
        assert_eq!(ds, back);
    }
}
