//! Object-level and image-level scores.
//!
//! Object-level methods reduce a [`MatchedSeries`] to one number; the
//! variance-based scores (`vps_iou`, `vps_conf`) take the population
//! standard deviation of the IoU or confidence series. Image-level methods
//! (`idp`, `loss`, `random`) score images directly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{DatasetIndex, ImageId, ImageRecord, ObjectId, PredictionLog};
use crate::matching::{EpochWindow, MatchedSeries};
use crate::ranking::Direction;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("empty series")]
    EmptySeries,
    #[error("no probability vector at epoch {epoch}")]
    MissingProbs { epoch: u32 },
    #[error("margin needs at least two categories")]
    SingleCategory,
    #[error("image {image_id} has no loss at epoch {epoch}")]
    MissingLoss { image_id: ImageId, epoch: u32 },
    #[error("method {0} is not {1}")]
    WrongLevel(Method, Level),
    #[error("method window {method} is not inside the series window {series}")]
    WindowNotCovered {
        method: EpochWindow,
        series: EpochWindow,
    },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("object {object_id}: {source}")]
    Object {
        object_id: ObjectId,
        #[source]
        source: Box<ScoreError>,
    },
}

impl ScoreError {
    pub fn code(&self) -> &'static str {
        match self {
            ScoreError::EmptySeries => "EmptySeries",
            ScoreError::MissingProbs { .. } => "MissingProbs",
            ScoreError::SingleCategory => "SingleCategory",
            ScoreError::MissingLoss { .. } => "MissingLoss",
            ScoreError::WrongLevel(..) => "WrongLevel",
            ScoreError::WindowNotCovered { .. } => "WindowNotCovered",
            ScoreError::UnknownMethod(_) => "UnknownMethod",
            ScoreError::Object { source, .. } => source.code(),
        }
    }

    /// Whether the error stems from the run configuration rather than the
    /// input files.
    pub fn is_config(&self) -> bool {
        match self {
            ScoreError::WrongLevel(..)
            | ScoreError::WindowNotCovered { .. }
            | ScoreError::UnknownMethod(_) => true,
            ScoreError::Object { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Object,
    Image,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Object => "object-level",
            Level::Image => "image-level",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    VpsIou,
    VpsConf,
    IouMean,
    ConfMean,
    El2n,
    Aum,
    Entropy,
    Forgetting,
    Correctness,
    Idp,
    Loss,
    Random,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::VpsIou,
        Method::VpsConf,
        Method::IouMean,
        Method::ConfMean,
        Method::El2n,
        Method::Aum,
        Method::Entropy,
        Method::Forgetting,
        Method::Correctness,
        Method::Idp,
        Method::Loss,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::VpsIou => "vps_iou",
            Method::VpsConf => "vps_conf",
            Method::IouMean => "iou_mean",
            Method::ConfMean => "conf_mean",
            Method::El2n => "el2n",
            Method::Aum => "aum",
            Method::Entropy => "entropy",
            Method::Forgetting => "forgetting",
            Method::Correctness => "correctness",
            Method::Idp => "idp",
            Method::Loss => "loss",
            Method::Random => "random",
        }
    }

    pub fn level(self) -> Level {
        match self {
            Method::Idp | Method::Loss | Method::Random => Level::Image,
            _ => Level::Object,
        }
    }

    /// Which end of the ranking is kept first.
    pub fn default_direction(self) -> Direction {
        use Direction::{KeepHighFirst as High, KeepLowFirst as Low};
        match self {
            Method::Idp => High,
            Method::Loss => High,
            Method::Random => High,
            Method::Aum => Low,
            Method::Entropy => High,
            Method::El2n => High,
            Method::Forgetting => High,
            Method::Correctness => Low,
            Method::IouMean => Low,
            Method::ConfMean => Low,
            Method::VpsIou => High,
            // ascending, as documented for the confidence variant
            Method::VpsConf => Low,
        }
    }

    pub fn default_window(self) -> MethodWindow {
        match self {
            Method::El2n => MethodWindow::First(10),
            _ => MethodWindow::Full,
        }
    }

    pub fn needs_probs(self) -> bool {
        matches!(self, Method::El2n | Method::Aum | Method::Entropy)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ScoreError::UnknownMethod(s.to_string()))
    }
}

/// Epochs a method reads, relative to the run window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodWindow {
    Full,
    /// The first `k` epochs of the run window.
    First(u32),
    /// The last `k` epochs of the run window.
    Last(u32),
    Exact(EpochWindow),
}

impl MethodWindow {
    pub fn resolve(self, run: EpochWindow) -> Result<EpochWindow, ScoreError> {
        let clip = |k: u32| k.clamp(1, run.len() as u32);
        let w = match self {
            MethodWindow::Full => run,
            MethodWindow::First(k) => {
                EpochWindow::new(run.start(), run.start() + clip(k) - 1).expect("non-empty")
            }
            MethodWindow::Last(k) => {
                EpochWindow::new(run.end() + 1 - clip(k), run.end()).expect("non-empty")
            }
            MethodWindow::Exact(w) => w,
        };
        if !run.contains_window(&w) {
            return Err(ScoreError::WindowNotCovered {
                method: w,
                series: run,
            });
        }
        Ok(w)
    }
}

/// A method plus its ranking direction and epoch window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreMethod {
    pub method: Method,
    pub direction: Direction,
    pub window: MethodWindow,
}

impl ScoreMethod {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            direction: method.default_direction(),
            window: method.default_window(),
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_window(mut self, window: MethodWindow) -> Self {
        self.window = window;
        self
    }

    pub fn level(&self) -> Level {
        self.method.level()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectScore {
    pub object_id: ObjectId,
    pub image_id: ImageId,
    pub value: f64,
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation of a series (the variance-based prediction
/// score).
pub fn vps(series: &[f64]) -> Result<f64, ScoreError> {
    let first = *series.first().ok_or(ScoreError::EmptySeries)?;
    if series.iter().all(|v| *v == first) {
        return Ok(0.0);
    }
    let n = series.len() as f64;
    let mean = mean_of(series);
    // corrected two-pass: the second sum removes rounding left in `mean`
    let (sum_sq, sum_dev) = series.iter().fold((0.0, 0.0), |(sq, dev), v| {
        let d = v - mean;
        (sq + d * d, dev + d)
    });
    let var = (sum_sq - sum_dev * sum_dev / n) / n;
    Ok(var.max(0.0).sqrt())
}

pub fn mean_value(series: &[f64]) -> Result<f64, ScoreError> {
    if series.is_empty() {
        return Err(ScoreError::EmptySeries);
    }
    Ok(mean_of(series))
}

fn require_probs<'a>(probs: &[Option<&'a [f64]>]) -> Result<Vec<&'a [f64]>, ScoreError> {
    if probs.is_empty() {
        return Err(ScoreError::EmptySeries);
    }
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            p.ok_or(ScoreError::MissingProbs {
                epoch: k as u32 + 1,
            })
        })
        .collect()
}

/// Mean L2 distance between the probability vector and the one-hot target.
/// The caller passes only the epochs to average over.
pub fn el2n(probs: &[Option<&[f64]>], gt_index: usize) -> Result<f64, ScoreError> {
    let probs = require_probs(probs)?;
    let total: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(c, v)| {
                    let target = if c == gt_index { 1.0 } else { 0.0 };
                    (v - target) * (v - target)
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean margin between the target-class probability and the largest other
/// probability.
pub fn aum(probs: &[Option<&[f64]>], gt_index: usize) -> Result<f64, ScoreError> {
    let probs = require_probs(probs)?;
    if probs.iter().any(|p| p.len() < 2) {
        return Err(ScoreError::SingleCategory);
    }
    let total: f64 = probs
        .iter()
        .map(|p| {
            let other = p
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != gt_index)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            p[gt_index] - other
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy_score(probs: &[Option<&[f64]>]) -> Result<f64, ScoreError> {
    let probs = require_probs(probs)?;
    let total: f64 = probs
        .iter()
        .map(|p| {
            -p.iter()
                .filter(|v| **v > 0.0)
                .map(|v| v * v.ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Number of correct-to-incorrect transitions.
pub fn forgetting(correct: &[bool]) -> Result<u32, ScoreError> {
    if correct.is_empty() {
        return Err(ScoreError::EmptySeries);
    }
    Ok(correct.windows(2).filter(|w| w[0] && !w[1]).count() as u32)
}

/// Number of epochs with a correct class prediction.
pub fn correctness(correct: &[bool]) -> Result<u32, ScoreError> {
    if correct.is_empty() {
        return Err(ScoreError::EmptySeries);
    }
    Ok(correct.iter().filter(|c| **c).count() as u32)
}

/// Scores one object over the method's window.
pub fn score_object(method: &ScoreMethod, series: &MatchedSeries) -> Result<f64, ScoreError> {
    if method.level() != Level::Object {
        return Err(ScoreError::WrongLevel(method.method, Level::Object));
    }
    let w = method.window.resolve(series.window)?;
    let lo = (w.start() - series.window.start()) as usize;
    let range = lo..lo + w.len();
    let probs = || -> Result<Vec<Option<&[f64]>>, ScoreError> {
        let ps = series
            .probs
            .as_ref()
            .ok_or(ScoreError::MissingProbs { epoch: w.start() })?;
        Ok(range.clone().map(|k| ps.get(k)).collect())
    };
    let result = match method.method {
        Method::VpsIou => vps(&series.iou[range.clone()]),
        Method::VpsConf => vps(&series.confidence[range.clone()]),
        Method::IouMean => mean_value(&series.iou[range.clone()]),
        Method::ConfMean => mean_value(&series.confidence[range.clone()]),
        Method::El2n => el2n(&probs()?, series.gt_index),
        Method::Aum => aum(&probs()?, series.gt_index),
        Method::Entropy => entropy_score(&probs()?),
        Method::Forgetting => forgetting(&series.correct[range.clone()]).map(f64::from),
        Method::Correctness => correctness(&series.correct[range.clone()]).map(f64::from),
        Method::Idp | Method::Loss | Method::Random => unreachable!("checked level"),
    };
    result.map_err(|e| match e {
        // report the absolute epoch rather than the offset in the slice
        ScoreError::MissingProbs { epoch } => ScoreError::MissingProbs {
            epoch: w.start() + epoch - 1,
        },
        other => other,
    })
}

/// One score per input series, in input order.
pub fn score_objects(
    method: &ScoreMethod,
    series: &[MatchedSeries],
) -> Result<Vec<ObjectScore>, ScoreError> {
    series
        .iter()
        .map(|s| {
            score_object(method, s)
                .map(|value| ObjectScore {
                    object_id: s.object_id,
                    image_id: s.image_id,
                    value,
                })
                .map_err(|e| {
                    if e.is_config() {
                        e
                    } else {
                        ScoreError::Object {
                            object_id: s.object_id,
                            source: Box::new(e),
                        }
                    }
                })
        })
        .collect()
}

/// Seeded uniform draw in `[0, 1)` that depends only on `(seed, image_id)`.
pub fn random_score(seed: u64, image_id: ImageId) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id.0);
    rng.gen::<f64>()
}

/// Instance density: the number of annotated objects.
pub fn idp_score(image: &ImageRecord) -> f64 {
    image.objects.len() as f64
}

/// Image-level scores for every annotated image. `run` is the run window;
/// the loss method reads the record at its last epoch (after applying the
/// method window).
pub fn image_level_score(
    method: &ScoreMethod,
    dataset: &DatasetIndex,
    log: Option<&PredictionLog>,
    run: EpochWindow,
    seed: u64,
) -> Result<BTreeMap<ImageId, f64>, ScoreError> {
    if method.level() != Level::Image {
        return Err(ScoreError::WrongLevel(method.method, Level::Image));
    }
    let end = method.window.resolve(run)?.end();
    dataset
        .annotated_images()
        .map(|im| {
            let value = match method.method {
                Method::Idp => idp_score(im),
                Method::Random => random_score(seed, im.image_id),
                Method::Loss => log
                    .and_then(|log| log.get(im.image_id, end))
                    .and_then(|r| r.loss)
                    .ok_or(ScoreError::MissingLoss {
                        image_id: im.image_id,
                        epoch: end,
                    })?,
                _ => unreachable!("checked level"),
            };
            Ok((im.image_id, value))
        })
        .collect()
}

/// Per-object (mean, std) summary used for the mean-versus-spread scatter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub image_id: ImageId,
    pub object_id: ObjectId,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub conf_mean: f64,
    pub conf_std: f64,
    pub correctness: u32,
    pub forgetting: u32,
}

pub const SCATTER_HEADER: &str =
    "image_id,object_id,iou_mean,iou_std,conf_mean,conf_std,correctness,forgetting";

pub fn scatter_point(series: &MatchedSeries) -> Result<ScatterPoint, ScoreError> {
    Ok(ScatterPoint {
        image_id: series.image_id,
        object_id: series.object_id,
        iou_mean: mean_value(&series.iou)?,
        iou_std: vps(&series.iou)?,
        conf_mean: mean_value(&series.confidence)?,
        conf_std: vps(&series.confidence)?,
        correctness: correctness(&series.correct)?,
        forgetting: forgetting(&series.correct)?,
    })
}

pub fn write_scatter(points: &[ScatterPoint]) -> Vec<u8> {
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.image_id,
            p.object_id,
            p.iou_mean,
            p.iou_std,
            p.conf_mean,
            p.conf_std,
            p.correctness,
            p.forgetting
        ));
    }
    out.into_bytes()
}
