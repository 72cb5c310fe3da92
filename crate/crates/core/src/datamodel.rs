//! Dataset, prediction-log and manifest records, with readers and writers
//! for the on-disk formats.
//!
//! Three formats are handled here:
//!
//! * COCO-style annotation documents (`images`, `annotations`, `categories`),
//!   boxes as `[x, y, w, h]`.
//! * Newline-delimited prediction logs, one `{epoch, image_id, predictions,
//!   loss?}` object per line, boxes as `[x1, y1, x2, y2]`.
//! * Prune manifests and scores CSVs, both written canonically so that equal
//!   values serialize to identical bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Current manifest `format_version`.
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Header line of the scores CSV.
pub const SCORES_HEADER: &str = "image_id,score,rank";

/// Probability vectors must sum to one within this tolerance.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(
    /// Image identifier as it appears in the annotation file.
    ImageId
);
id_type!(
    /// Category identifier as it appears in the annotation file.
    CategoryId
);
id_type!(
    /// Annotation identifier, unique across the dataset.
    ObjectId
);

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("annotation {annotation} references missing {kind} {id}")]
    DanglingReference {
        annotation: u64,
        kind: &'static str,
        id: u64,
    },
    #[error("annotation {0} has negative width or height")]
    NegativeExtent(u64),
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("line {line}: duplicate record for epoch {epoch}, image {image_id}")]
    DuplicateRecord {
        line: usize,
        epoch: u32,
        image_id: ImageId,
    },
    #[error("line {line}: {detail}")]
    OutOfRange { line: usize, detail: String },
    #[error("line {line}: probability vector has {found} entries, expected {expected}")]
    ProbLengthMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unsupported manifest format_version {0}")]
    UnsupportedVersion(u64),
    #[error("kept_image_ids must be strictly ascending")]
    UnsortedOrDuplicateIds,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::MalformedDocument(_) => "MalformedDocument",
            FormatError::DanglingReference { .. } => "DanglingReference",
            FormatError::NegativeExtent(_) => "NegativeExtent",
            FormatError::MalformedLine { .. } => "MalformedLine",
            FormatError::DuplicateRecord { .. } => "DuplicateRecord",
            FormatError::OutOfRange { .. } => "OutOfRange",
            FormatError::ProbLengthMismatch { .. } => "ProbLengthMismatch",
            FormatError::UnsupportedVersion(_) => "UnsupportedVersion",
            FormatError::UnsortedOrDuplicateIds => "UnsortedOrDuplicateIds",
            FormatError::Io(_) => "Io",
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub object_id: ObjectId,
    pub bbox: BBox,
    pub category: CategoryId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub file_name: String,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub objects: Vec<GroundTruthObject>,
}

impl ImageRecord {
    pub fn is_annotated(&self) -> bool {
        !self.objects.is_empty()
    }
}

/// The full training set: images (ascending by id) and the category catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    images: Vec<ImageRecord>,
    by_id: HashMap<ImageId, usize>,
    categories: BTreeMap<CategoryId, String>,
    category_pos: HashMap<CategoryId, usize>,
}

impl DatasetIndex {
    /// Validates ids and references and sorts images by id.
    pub fn new(
        mut images: Vec<ImageRecord>,
        categories: BTreeMap<CategoryId, String>,
    ) -> Result<Self, FormatError> {
        images.sort_by_key(|im| im.image_id);
        let mut by_id = HashMap::with_capacity(images.len());
        let mut object_ids = HashSet::new();
        for (pos, image) in images.iter().enumerate() {
            if by_id.insert(image.image_id, pos).is_some() {
                return Err(FormatError::MalformedDocument(format!(
                    "duplicate image id {}",
                    image.image_id
                )));
            }
            for obj in &image.objects {
                if !object_ids.insert(obj.object_id) {
                    return Err(FormatError::MalformedDocument(format!(
                        "duplicate annotation id {}",
                        obj.object_id
                    )));
                }
                if !categories.contains_key(&obj.category) {
                    return Err(FormatError::DanglingReference {
                        annotation: obj.object_id.0,
                        kind: "category",
                        id: obj.category.0,
                    });
                }
            }
        }
        let category_pos = categories
            .keys()
            .enumerate()
            .map(|(pos, id)| (*id, pos))
            .collect();
        Ok(Self {
            images,
            by_id,
            categories,
            category_pos,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.by_id.get(&id).map(|&pos| &self.images[pos])
    }

    /// Position of an image in [`images`](Self::images).
    pub fn image_position(&self, id: ImageId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn categories(&self) -> &BTreeMap<CategoryId, String> {
        &self.categories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Index of a category inside probability vectors. Vectors are laid out
    /// in ascending category-id order.
    pub fn category_index(&self, id: CategoryId) -> Option<usize> {
        self.category_pos.get(&id).copied()
    }

    pub fn num_annotations(&self) -> usize {
        self.images.iter().map(|im| im.objects.len()).sum()
    }

    /// Images with at least one annotation; only these are ever ranked.
    pub fn annotated_images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(|im| im.is_annotated())
    }

    pub fn unannotated_image_ids(&self) -> Vec<ImageId> {
        self.images
            .iter()
            .filter(|im| !im.is_annotated())
            .map(|im| im.image_id)
            .collect()
    }
}

#[derive(Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize, Serialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
}

#[derive(Deserialize, Serialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize, Serialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize)]
struct CocoDocumentOut {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Reads a COCO-style annotation document. Unknown keys are ignored.
pub fn parse_annotations<R: Read>(reader: R) -> Result<DatasetIndex, FormatError> {
    let doc: CocoDocument = serde_json::from_reader(reader)
        .map_err(|e| FormatError::MalformedDocument(e.to_string()))?;

    let categories: BTreeMap<CategoryId, String> = doc
        .categories
        .into_iter()
        .map(|c| (CategoryId(c.id), c.name))
        .collect();

    let mut images: Vec<ImageRecord> = Vec::with_capacity(doc.images.len());
    let mut pos: HashMap<u64, usize> = HashMap::with_capacity(doc.images.len());
    for im in doc.images {
        if pos.insert(im.id, images.len()).is_some() {
            return Err(FormatError::MalformedDocument(format!(
                "duplicate image id {}",
                im.id
            )));
        }
        images.push(ImageRecord {
            image_id: ImageId(im.id),
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            objects: Vec::new(),
        });
    }

    for ann in doc.annotations {
        let Some(&slot) = pos.get(&ann.image_id) else {
            return Err(FormatError::DanglingReference {
                annotation: ann.id,
                kind: "image",
                id: ann.image_id,
            });
        };
        if !categories.contains_key(&CategoryId(ann.category_id)) {
            return Err(FormatError::DanglingReference {
                annotation: ann.id,
                kind: "category",
                id: ann.category_id,
            });
        }
        let [x, y, w, h] = ann.bbox;
        if w < 0.0 || h < 0.0 {
            return Err(FormatError::NegativeExtent(ann.id));
        }
        let bbox = BBox::from_xywh(x, y, w, h)
            .map_err(|e| FormatError::MalformedDocument(format!("annotation {}: {e}", ann.id)))?;
        images[slot].objects.push(GroundTruthObject {
            object_id: ObjectId(ann.id),
            bbox,
            category: CategoryId(ann.category_id),
        });
    }

    DatasetIndex::new(images, categories)
}

/// Serializes a dataset back to a COCO-style document (boxes as xywh).
pub fn write_annotations(dataset: &DatasetIndex) -> Vec<u8> {
    let doc = CocoDocumentOut {
        images: dataset
            .images()
            .iter()
            .map(|im| CocoImage {
                id: im.image_id.0,
                file_name: im.file_name.clone(),
                width: im.width,
                height: im.height,
            })
            .collect(),
        annotations: dataset
            .images()
            .iter()
            .flat_map(|im| {
                im.objects.iter().map(move |o| CocoAnnotation {
                    id: o.object_id.0,
                    image_id: im.image_id.0,
                    category_id: o.category.0,
                    bbox: [
                        o.bbox.x_min(),
                        o.bbox.y_min(),
                        o.bbox.width(),
                        o.bbox.height(),
                    ],
                })
            })
            .collect(),
        categories: dataset
            .categories()
            .iter()
            .map(|(id, name)| CocoCategory {
                id: id.0,
                name: name.clone(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&doc).expect("annotation document serializes");
    out.push(b'\n');
    out
}

// ---------------------------------------------------------------------------
// Prediction log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub category: CategoryId,
    pub confidence: f64,
    /// Per-category probabilities in ascending category-id order.
    pub probs: Option<Vec<f64>>,
}

/// Detector output for one image at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochImageLog {
    /// 1-based.
    pub epoch: u32,
    pub image_id: ImageId,
    pub predictions: Vec<Prediction>,
    pub loss: Option<f64>,
}

#[derive(Deserialize, Serialize)]
struct RawRecord {
    epoch: u32,
    image_id: u64,
    predictions: Vec<RawPrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
}

#[derive(Deserialize, Serialize)]
struct RawPrediction {
    bbox: [f64; 4],
    category_id: u64,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
}

/// Parses and validates one log line. `line_no` is 1-based and only used in
/// error messages.
pub fn parse_log_line(line: &str, line_no: usize) -> Result<EpochImageLog, FormatError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| FormatError::MalformedLine {
        line: line_no,
        detail: e.to_string(),
    })?;
    if raw.epoch == 0 {
        return Err(FormatError::MalformedLine {
            line: line_no,
            detail: "epoch must be >= 1".into(),
        });
    }
    if let Some(loss) = raw.loss {
        if loss < 0.0 {
            return Err(FormatError::OutOfRange {
                line: line_no,
                detail: format!("loss {loss} is negative"),
            });
        }
    }
    let mut predictions = Vec::with_capacity(raw.predictions.len());
    for (k, p) in raw.predictions.into_iter().enumerate() {
        let [x1, y1, x2, y2] = p.bbox;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| FormatError::MalformedLine {
            line: line_no,
            detail: format!("prediction {k}: {e}"),
        })?;
        if !(0.0..=1.0).contains(&p.score) {
            return Err(FormatError::OutOfRange {
                line: line_no,
                detail: format!("prediction {k}: confidence {} outside [0, 1]", p.score),
            });
        }
        if let Some(probs) = &p.probs {
            if let Some(bad) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(FormatError::OutOfRange {
                    line: line_no,
                    detail: format!("prediction {k}: probability {bad} outside [0, 1]"),
                });
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(FormatError::OutOfRange {
                    line: line_no,
                    detail: format!("prediction {k}: probabilities sum to {sum}"),
                });
            }
        }
        predictions.push(Prediction {
            bbox,
            category: CategoryId(p.category_id),
            confidence: p.score,
            probs: p.probs,
        });
    }
    Ok(EpochImageLog {
        epoch: raw.epoch,
        image_id: ImageId(raw.image_id),
        predictions,
        loss: raw.loss,
    })
}

/// Serializes one record as a single log line, without the trailing newline.
pub fn write_log_line(record: &EpochImageLog) -> String {
    let raw = RawRecord {
        epoch: record.epoch,
        image_id: record.image_id.0,
        predictions: record
            .predictions
            .iter()
            .map(|p| RawPrediction {
                bbox: p.bbox.to_xyxy(),
                category_id: p.category.0,
                score: p.confidence,
                probs: p.probs.clone(),
            })
            .collect(),
        loss: record.loss,
    };
    serde_json::to_string(&raw).expect("log record serializes")
}

/// Tracks the probability-vector length seen so far in a log.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProbLengthCheck {
    expected: Option<usize>,
}

impl ProbLengthCheck {
    pub fn expecting(len: usize) -> Self {
        Self {
            expected: Some(len),
        }
    }

    pub fn check(&mut self, record: &EpochImageLog, line_no: usize) -> Result<(), FormatError> {
        for p in &record.predictions {
            if let Some(probs) = &p.probs {
                match self.expected {
                    None => self.expected = Some(probs.len()),
                    Some(expected) if expected != probs.len() => {
                        return Err(FormatError::ProbLengthMismatch {
                            line: line_no,
                            expected,
                            found: probs.len(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

/// All log records, keyed by `(image_id, epoch)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionLog {
    records: BTreeMap<(ImageId, u32), EpochImageLog>,
    max_epoch: u32,
}

impl PredictionLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record; returns it back if `(epoch, image_id)` is taken.
    pub fn insert(&mut self, record: EpochImageLog) -> Result<(), EpochImageLog> {
        let key = (record.image_id, record.epoch);
        if self.records.contains_key(&key) {
            return Err(record);
        }
        self.max_epoch = self.max_epoch.max(record.epoch);
        self.records.insert(key, record);
        Ok(())
    }

    pub fn get(&self, image_id: ImageId, epoch: u32) -> Option<&EpochImageLog> {
        self.records.get(&(image_id, epoch))
    }

    /// Largest epoch present (`T`); 0 for an empty log.
    pub fn max_epoch(&self) -> u32 {
        self.max_epoch
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in `(image_id, epoch)` order.
    pub fn records(&self) -> impl Iterator<Item = &EpochImageLog> {
        self.records.values()
    }

    /// Records in `(epoch, image_id)` order, the order a trainer emits them.
    pub fn records_epoch_major(&self) -> Vec<&EpochImageLog> {
        let mut out: Vec<_> = self.records.values().collect();
        out.sort_by_key(|r| (r.epoch, r.image_id));
        out
    }

    /// For each logged image, the epochs in `1..=T` that have no record.
    pub fn gaps(&self) -> Vec<(ImageId, Vec<u32>)> {
        let mut seen: BTreeMap<ImageId, Vec<u32>> = BTreeMap::new();
        for (image, epoch) in self.records.keys() {
            seen.entry(*image).or_default().push(*epoch);
        }
        seen.into_iter()
            .filter_map(|(image, epochs)| {
                let present: HashSet<u32> = epochs.into_iter().collect();
                let missing: Vec<u32> = (1..=self.max_epoch)
                    .filter(|e| !present.contains(e))
                    .collect();
                (!missing.is_empty()).then_some((image, missing))
            })
            .collect()
    }

    /// Serializes the log epoch-major, one line per record.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for record in self.records_epoch_major() {
            out.push_str(&write_log_line(record));
            out.push('\n');
        }
        out
    }
}

/// Reads a whole newline-delimited log. Blank lines are skipped.
pub fn parse_logs<R: BufRead>(reader: R) -> Result<PredictionLog, FormatError> {
    parse_logs_checked(reader, ProbLengthCheck::default())
}

/// As [`parse_logs`], with a caller-supplied probability-length check
/// (typically [`ProbLengthCheck::expecting`] the dataset's category count).
pub fn parse_logs_checked<R: BufRead>(
    reader: R,
    mut probs: ProbLengthCheck,
) -> Result<PredictionLog, FormatError> {
    let mut log = PredictionLog::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_log_line(&line, line_no)?;
        probs.check(&record, line_no)?;
        log.insert(record)
            .map_err(|r| FormatError::DuplicateRecord {
                line: line_no,
                epoch: r.epoch,
                image_id: r.image_id,
            })?;
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// A reproducible selection result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneManifest {
    pub format_version: u32,
    pub method: String,
    /// Aggregation identifier, or `"n/a"` for image-level methods.
    pub aggregation: String,
    pub prune_ratio: f64,
    pub seed: u64,
    pub kept_image_ids: Vec<ImageId>,
    /// Zero-annotation images, listed only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unranked_image_ids: Option<Vec<ImageId>>,
}

impl PruneManifest {
    pub fn kept_set(&self) -> HashSet<ImageId> {
        self.kept_image_ids.iter().copied().collect()
    }
}

/// Canonical serialization: fixed key order, ascending ids, trailing newline.
pub fn write_manifest(manifest: &PruneManifest) -> Vec<u8> {
    let mut canonical = manifest.clone();
    canonical.kept_image_ids.sort_unstable();
    canonical.kept_image_ids.dedup();
    if let Some(ids) = canonical.unranked_image_ids.as_mut() {
        ids.sort_unstable();
        ids.dedup();
    }
    let mut out = serde_json::to_vec(&canonical).expect("manifest serializes");
    out.push(b'\n');
    out
}

pub fn parse_manifest(bytes: &[u8]) -> Result<PruneManifest, FormatError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| FormatError::MalformedDocument(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| FormatError::MalformedDocument("missing format_version".into()))?;
    if version != u64::from(MANIFEST_FORMAT_VERSION) {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let manifest: PruneManifest =
        serde_json::from_value(value).map_err(|e| FormatError::MalformedDocument(e.to_string()))?;
    if !(0.0..1.0).contains(&manifest.prune_ratio) {
        return Err(FormatError::MalformedDocument(format!(
            "prune_ratio {} outside [0, 1)",
            manifest.prune_ratio
        )));
    }
    if manifest.kept_image_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FormatError::UnsortedOrDuplicateIds);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Scores CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: ImageId,
    pub score: f64,
    pub rank: usize,
}

pub fn write_scores(rows: &[ScoreRow]) -> Vec<u8> {
    let mut out = String::with_capacity(rows.len() * 24 + SCORES_HEADER.len() + 1);
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for row in rows {
        // `Display` for f64 prints the shortest string that parses back exactly.
        out.push_str(&format!("{},{},{}\n", row.image_id, row.score, row.rank));
    }
    out.into_bytes()
}

/// Reads a scores CSV; rows are returned in rank order.
pub fn parse_scores<R: Read>(reader: R) -> Result<Vec<ScoreRow>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| FormatError::MalformedDocument(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>().join(",") != SCORES_HEADER {
        return Err(FormatError::MalformedDocument(format!(
            "expected header \"{SCORES_HEADER}\""
        )));
    }
    let mut rows: Vec<ScoreRow> = Vec::new();
    for row in rdr.deserialize() {
        let row: ScoreRow = row.map_err(|e| FormatError::MalformedDocument(e.to_string()))?;
        if !row.score.is_finite() {
            return Err(FormatError::MalformedDocument(format!(
                "image {}: non-finite score",
                row.image_id
            )));
        }
        rows.push(row);
    }
    rows.sort_by_key(|r| r.rank);
    let mut ids = HashSet::with_capacity(rows.len());
    for (pos, row) in rows.iter().enumerate() {
        if row.rank != pos + 1 {
            return Err(FormatError::MalformedDocument(
                "ranks must be contiguous from 1".into(),
            ));
        }
        if !ids.insert(row.image_id) {
            return Err(FormatError::MalformedDocument(format!(
                "image {} ranked twice",
                row.image_id
            )));
        }
    }
    Ok(rows)
}
