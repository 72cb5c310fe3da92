//! Class-prioritized, IoU-aware assignment of predictions to ground-truth
//! objects, and assembly of the per-object, epoch-indexed value series.
//!
//! For every ground-truth object and epoch the candidate pool is the set of
//! predictions with strictly positive IoU. If any candidate carries the
//! object's class, the best same-class candidate wins; otherwise the best
//! candidate of any class wins. IoU ties go to the lowest prediction index.
//! A prediction may be assigned to several objects.
//!
//! Epochs with no candidate are imputed: IoU 0, confidence 0, incorrect
//! class, uniform probability vector.

use std::fmt;
use std::str::FromStr;

use crate::datamodel::{
    CategoryId, DatasetIndex, EpochImageLog, GroundTruthObject, ImageId, ObjectId, Prediction,
    PredictionLog,
};
use crate::geometry::iou;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("image {image_id} has no log record for epoch {epoch}")]
    MissingEpochRecord { image_id: ImageId, epoch: u32 },
    #[error("window ends at epoch {window_end} but the log only reaches epoch {log_epochs}")]
    WindowExceedsLog { window_end: u32, log_epochs: u32 },
    #[error("invalid epoch window: {0}")]
    InvalidWindow(String),
    #[error("log references image {0}, which is not in the dataset")]
    UnknownImage(ImageId),
    #[error("image {image_id}, epoch {epoch}: unknown category {category}")]
    UnknownCategory {
        image_id: ImageId,
        epoch: u32,
        category: CategoryId,
    },
    #[error("image {image_id}, epoch {epoch}: probability vector has {found} entries, expected {expected}")]
    ProbLengthMismatch {
        image_id: ImageId,
        epoch: u32,
        expected: usize,
        found: usize,
    },
    #[error("duplicate record for epoch {epoch}, image {image_id}")]
    DuplicateRecord { image_id: ImageId, epoch: u32 },
}

impl MatchError {
    pub fn code(&self) -> &'static str {
        match self {
            MatchError::MissingEpochRecord { .. } => "MissingEpochRecord",
            MatchError::WindowExceedsLog { .. } => "WindowExceedsLog",
            MatchError::InvalidWindow(_) => "InvalidWindow",
            MatchError::UnknownImage(_) => "DanglingReference",
            MatchError::UnknownCategory { .. } => "DanglingReference",
            MatchError::ProbLengthMismatch { .. } => "ProbLengthMismatch",
            MatchError::DuplicateRecord { .. } => "DuplicateRecord",
        }
    }
}

/// Inclusive, 1-based epoch range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EpochWindow {
    start: u32,
    end: u32,
}

impl EpochWindow {
    pub fn new(start: u32, end: u32) -> Result<Self, MatchError> {
        if start == 0 || end < start {
            return Err(MatchError::InvalidWindow(format!("{start}:{end}")));
        }
        Ok(Self { start, end })
    }

    /// Epochs `1..=len`.
    pub fn first(len: u32) -> Result<Self, MatchError> {
        Self::new(1, len)
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn end(&self) -> u32 {
        self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, epoch: u32) -> bool {
        (self.start..=self.end).contains(&epoch)
    }

    /// Offset of `epoch` inside the window.
    pub fn offset(&self, epoch: u32) -> Option<usize> {
        self.contains(epoch).then(|| (epoch - self.start) as usize)
    }

    pub fn epochs(&self) -> std::ops::RangeInclusive<u32> {
        self.start..=self.end
    }

    pub fn contains_window(&self, other: &EpochWindow) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl fmt::Display for EpochWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl FromStr for EpochWindow {
    type Err = MatchError;

    /// Parses `"a:b"` (inclusive) or a bare `"b"` meaning `1:b`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MatchError::InvalidWindow(s.to_string());
        match s.split_once(':') {
            Some((a, b)) => {
                let a = a.trim().parse().map_err(|_| bad())?;
                let b = b.trim().parse().map_err(|_| bad())?;
                Self::new(a, b)
            }
            None => Self::first(s.trim().parse().map_err(|_| bad())?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPrediction<'a> {
    pub prediction_index: usize,
    pub iou: f64,
    pub confidence: f64,
    pub category: CategoryId,
    pub probs: Option<&'a [f64]>,
}

/// The prediction chosen for one ground-truth object at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment<'a> {
    pub object_id: ObjectId,
    pub epoch: u32,
    pub matched: Option<MatchedPrediction<'a>>,
}

/// Assigns at most one prediction to each ground-truth object for a single
/// epoch. The output is parallel to `gt_objects`.
pub fn cipa_match<'a>(
    epoch: u32,
    gt_objects: &[GroundTruthObject],
    predictions: &'a [Prediction],
) -> Vec<Assignment<'a>> {
    gt_objects
        .iter()
        .map(|gt| {
            let mut best_same: Option<(usize, f64)> = None;
            let mut best_any: Option<(usize, f64)> = None;
            for (k, pred) in predictions.iter().enumerate() {
                let v = iou(&gt.bbox, &pred.bbox);
                if v <= 0.0 {
                    continue;
                }
                // strict `>` keeps the lowest index on ties
                if best_any.is_none_or(|(_, b)| v > b) {
                    best_any = Some((k, v));
                }
                if pred.category == gt.category && best_same.is_none_or(|(_, b)| v > b) {
                    best_same = Some((k, v));
                }
            }
            let matched = best_same.or(best_any).map(|(k, v)| {
                let pred = &predictions[k];
                MatchedPrediction {
                    prediction_index: k,
                    iou: v,
                    confidence: pred.confidence,
                    category: pred.category,
                    probs: pred.probs.as_deref(),
                }
            });
            Assignment {
                object_id: gt.object_id,
                epoch,
                matched,
            }
        })
        .collect()
}

/// Probability vectors over a window, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSeries {
    num_classes: usize,
    values: Vec<f64>,
    present: Vec<bool>,
}

impl ProbSeries {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            values: Vec::new(),
            present: Vec::new(),
        }
    }

    pub fn from_vectors(num_classes: usize, vectors: &[Option<Vec<f64>>]) -> Self {
        let mut out = Self::new(num_classes);
        for v in vectors {
            out.push(v.as_deref());
        }
        out
    }

    /// Appends one epoch; `None` marks a matched epoch without probabilities.
    pub fn push(&mut self, probs: Option<&[f64]>) {
        match probs {
            Some(p) => {
                debug_assert_eq!(p.len(), self.num_classes);
                self.values.extend_from_slice(p);
                self.present.push(true);
            }
            None => {
                self.values
                    .extend(std::iter::repeat_n(0.0, self.num_classes));
                self.present.push(false);
            }
        }
    }

    pub fn push_uniform(&mut self) {
        let u = 1.0 / self.num_classes as f64;
        self.values.extend(std::iter::repeat_n(u, self.num_classes));
        self.present.push(true);
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn get(&self, k: usize) -> Option<&[f64]> {
        self.present[k].then(|| &self.values[k * self.num_classes..(k + 1) * self.num_classes])
    }

    /// Epoch vectors in window order.
    pub fn vectors(&self) -> Vec<Option<&[f64]>> {
        (0..self.len()).map(|k| self.get(k)).collect()
    }
}

/// Per-object series over an epoch window.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSeries {
    pub object_id: ObjectId,
    pub image_id: ImageId,
    pub gt_category: CategoryId,
    /// Position of `gt_category` in probability vectors.
    pub gt_index: usize,
    pub window: EpochWindow,
    pub iou: Vec<f64>,
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
    pub matched: Vec<bool>,
    /// `None` when probabilities were not collected.
    pub probs: Option<ProbSeries>,
}

impl MatchedSeries {
    pub fn len(&self) -> usize {
        self.iou.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iou.is_empty()
    }
}

/// What one ground-truth object saw in one log record.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub iou: f64,
    pub confidence: f64,
    pub category: Option<CategoryId>,
    pub probs: Option<Vec<f64>>,
}

/// A log record reduced to per-object observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedRecord {
    pub image_pos: usize,
    pub image_id: ImageId,
    pub epoch: u32,
    pub loss: Option<f64>,
    /// Parallel to the image's objects; empty when the epoch is outside
    /// the window of interest.
    pub observations: Vec<Observation>,
}

/// Validates a record against the dataset and runs the assignment.
///
/// `window` limits matching work to epochs that will be used; records
/// outside it are still validated and returned with no observations.
pub fn match_record(
    dataset: &DatasetIndex,
    record: &EpochImageLog,
    window: EpochWindow,
    collect_probs: bool,
) -> Result<MatchedRecord, MatchError> {
    let image_pos = dataset
        .image_position(record.image_id)
        .ok_or(MatchError::UnknownImage(record.image_id))?;
    let image = &dataset.images()[image_pos];
    let num_classes = dataset.num_categories();
    for p in &record.predictions {
        if dataset.category_index(p.category).is_none() {
            return Err(MatchError::UnknownCategory {
                image_id: record.image_id,
                epoch: record.epoch,
                category: p.category,
            });
        }
        if let Some(probs) = &p.probs {
            if probs.len() != num_classes {
                return Err(MatchError::ProbLengthMismatch {
                    image_id: record.image_id,
                    epoch: record.epoch,
                    expected: num_classes,
                    found: probs.len(),
                });
            }
        }
    }
    let observations = if window.contains(record.epoch) {
        cipa_match(record.epoch, &image.objects, &record.predictions)
            .into_iter()
            .map(|a| match a.matched {
                Some(m) => Observation {
                    iou: m.iou,
                    confidence: m.confidence,
                    category: Some(m.category),
                    probs: if collect_probs {
                        m.probs.map(<[f64]>::to_vec)
                    } else {
                        None
                    },
                },
                None => Observation {
                    iou: 0.0,
                    confidence: 0.0,
                    category: None,
                    probs: None,
                },
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(MatchedRecord {
        image_pos,
        image_id: record.image_id,
        epoch: record.epoch,
        loss: record.loss,
        observations,
    })
}

#[derive(Debug, Default)]
struct ImageSlot {
    seen_epochs: Vec<u64>,
    iou: Vec<f64>,
    confidence: Vec<f64>,
    correct: Vec<bool>,
    matched: Vec<bool>,
    probs: Vec<Option<Vec<f64>>>,
    filled: Vec<bool>,
    loss_at_end: Option<f64>,
}

impl ImageSlot {
    fn mark_seen(&mut self, epoch: u32) -> bool {
        let word = (epoch / 64) as usize;
        let bit = 1u64 << (epoch % 64);
        if self.seen_epochs.len() <= word {
            self.seen_epochs.resize(word + 1, 0);
        }
        let fresh = self.seen_epochs[word] & bit == 0;
        self.seen_epochs[word] |= bit;
        fresh
    }
}

/// Accumulates matched records into per-object series without holding the
/// log. Records may arrive in any order.
#[derive(Debug)]
pub struct SeriesBuilder<'d> {
    dataset: &'d DatasetIndex,
    window: EpochWindow,
    collect_probs: bool,
    slots: Vec<ImageSlot>,
    max_epoch: u32,
}

impl<'d> SeriesBuilder<'d> {
    pub fn new(dataset: &'d DatasetIndex, window: EpochWindow, collect_probs: bool) -> Self {
        let w = window.len();
        let slots = dataset
            .images()
            .iter()
            .map(|im| {
                let n = im.objects.len() * w;
                ImageSlot {
                    iou: vec![0.0; n],
                    confidence: vec![0.0; n],
                    correct: vec![false; n],
                    matched: vec![false; n],
                    probs: if collect_probs && n > 0 {
                        vec![None; n]
                    } else {
                        Vec::new()
                    },
                    filled: if n > 0 { vec![false; w] } else { Vec::new() },
                    ..ImageSlot::default()
                }
            })
            .collect();
        Self {
            dataset,
            window,
            collect_probs,
            slots,
            max_epoch: 0,
        }
    }

    pub fn window(&self) -> EpochWindow {
        self.window
    }

    pub fn collects_probs(&self) -> bool {
        self.collect_probs
    }

    pub fn dataset(&self) -> &'d DatasetIndex {
        self.dataset
    }

    /// Matches and stores one raw record.
    pub fn ingest(&mut self, record: &EpochImageLog) -> Result<(), MatchError> {
        let matched = match_record(self.dataset, record, self.window, self.collect_probs)?;
        self.ingest_matched(matched)
    }

    /// Stores a record already reduced by [`match_record`] with this
    /// builder's window.
    pub fn ingest_matched(&mut self, record: MatchedRecord) -> Result<(), MatchError> {
        let w = self.window.len();
        let image = &self.dataset.images()[record.image_pos];
        let slot = &mut self.slots[record.image_pos];
        if !slot.mark_seen(record.epoch) {
            return Err(MatchError::DuplicateRecord {
                image_id: record.image_id,
                epoch: record.epoch,
            });
        }
        self.max_epoch = self.max_epoch.max(record.epoch);
        if record.epoch == self.window.end() {
            slot.loss_at_end = record.loss;
        }
        let Some(t) = self.window.offset(record.epoch) else {
            return Ok(());
        };
        if image.objects.is_empty() {
            return Ok(());
        }
        debug_assert_eq!(record.observations.len(), image.objects.len());
        slot.filled[t] = true;
        for (j, (obs, gt)) in record
            .observations
            .into_iter()
            .zip(&image.objects)
            .enumerate()
        {
            let at = j * w + t;
            slot.iou[at] = obs.iou;
            slot.confidence[at] = obs.confidence;
            slot.matched[at] = obs.category.is_some();
            slot.correct[at] = obs.category == Some(gt.category);
            if self.collect_probs {
                slot.probs[at] = obs.probs;
            }
        }
        Ok(())
    }

    /// Largest epoch ingested so far.
    pub fn max_epoch(&self) -> u32 {
        self.max_epoch
    }

    /// Checks coverage of the window for every annotated image.
    pub fn finish(self) -> Result<SeriesSet<'d>, MatchError> {
        if self.window.end() > self.max_epoch {
            return Err(MatchError::WindowExceedsLog {
                window_end: self.window.end(),
                log_epochs: self.max_epoch,
            });
        }
        for (image, slot) in self.dataset.images().iter().zip(&self.slots) {
            if let Some(t) = slot.filled.iter().position(|f| !f) {
                return Err(MatchError::MissingEpochRecord {
                    image_id: image.image_id,
                    epoch: self.window.start() + t as u32,
                });
            }
        }
        Ok(SeriesSet {
            dataset: self.dataset,
            window: self.window,
            collect_probs: self.collect_probs,
            slots: self.slots,
            max_epoch: self.max_epoch,
        })
    }
}

/// Complete per-object series for every annotated image.
#[derive(Debug)]
pub struct SeriesSet<'d> {
    dataset: &'d DatasetIndex,
    window: EpochWindow,
    collect_probs: bool,
    slots: Vec<ImageSlot>,
    max_epoch: u32,
}

impl<'d> SeriesSet<'d> {
    pub fn window(&self) -> EpochWindow {
        self.window
    }

    pub fn max_epoch(&self) -> u32 {
        self.max_epoch
    }

    pub fn dataset(&self) -> &'d DatasetIndex {
        self.dataset
    }

    /// Loss recorded at the last window epoch, when the record carried one.
    pub fn loss_at_end(&self, image_pos: usize) -> Option<f64> {
        self.slots[image_pos].loss_at_end
    }

    /// Whether a record exists for the last window epoch.
    pub fn has_end_record(&self, image_pos: usize) -> bool {
        let e = self.window.end();
        self.slots[image_pos]
            .seen_epochs
            .get((e / 64) as usize)
            .is_some_and(|word| word & (1u64 << (e % 64)) != 0)
    }

    /// Materializes the series of one image, in annotation order.
    pub fn image_series(&self, image_pos: usize) -> Vec<MatchedSeries> {
        let image = &self.dataset.images()[image_pos];
        let slot = &self.slots[image_pos];
        let w = self.window.len();
        let num_classes = self.dataset.num_categories();
        image
            .objects
            .iter()
            .enumerate()
            .map(|(j, gt)| {
                let range = j * w..(j + 1) * w;
                let probs = self.collect_probs.then(|| {
                    let mut ps = ProbSeries::new(num_classes);
                    for at in range.clone() {
                        if !slot.matched[at] {
                            ps.push_uniform();
                        } else {
                            ps.push(slot.probs[at].as_deref());
                        }
                    }
                    ps
                });
                MatchedSeries {
                    object_id: gt.object_id,
                    image_id: image.image_id,
                    gt_category: gt.category,
                    gt_index: self
                        .dataset
                        .category_index(gt.category)
                        .expect("dataset categories validated"),
                    window: self.window,
                    iou: slot.iou[range.clone()].to_vec(),
                    confidence: slot.confidence[range.clone()].to_vec(),
                    correct: slot.correct[range.clone()].to_vec(),
                    matched: slot.matched[range].to_vec(),
                    probs,
                }
            })
            .collect()
    }

    /// All series, images ascending by id.
    pub fn into_series(self) -> Vec<MatchedSeries> {
        (0..self.slots.len())
            .flat_map(|pos| self.image_series(pos))
            .collect()
    }
}

/// Runs the assignment for every `(image, epoch)` of the window and returns
/// one series per ground-truth object, with probabilities collected.
pub fn build_series(
    dataset: &DatasetIndex,
    log: &PredictionLog,
    window: EpochWindow,
) -> Result<Vec<MatchedSeries>, MatchError> {
    let mut builder = SeriesBuilder::new(dataset, window, true);
    for record in log.records() {
        builder.ingest(record)?;
    }
    Ok(builder.finish()?.into_series())
}
