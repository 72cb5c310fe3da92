//! Streaming parse → match → score → rank over a newline-delimited log.
//!
//! Lines are parsed and matched in parallel batches and folded into a
//! [`SeriesBuilder`] in line order, so only per-image series state is held
//! and the output does not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::io::{self, BufRead};

use rayon::prelude::*;
use serde::Deserialize;

use crate::datamodel::{parse_log_line, DatasetIndex, FormatError, ImageId, ProbLengthCheck};
use crate::matching::{
    match_record, EpochWindow, MatchError, MatchedRecord, SeriesBuilder, SeriesSet,
};
use crate::ranking::{aggregate, rank, AggregationKind, RankedList};
use crate::scoring::{image_level_score, score_objects, Level, Method, ScoreError, ScoreMethod};
use crate::Error;

/// Lines handed to the parallel stage at once.
pub const BATCH_LINES: usize = 8192;

/// Everything needed to turn a log into an image ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRequest {
    pub method: ScoreMethod,
    /// Required for object-level methods, rejected for image-level ones.
    pub aggregation: Option<AggregationKind>,
    /// Epochs of the run that scores are computed over.
    pub window: EpochWindow,
    pub seed: u64,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<(), Error> {
        match (self.method.level(), self.aggregation) {
            (Level::Object, None) => Err(Error::Config(format!(
                "method {} needs an aggregation",
                self.method.method
            ))),
            (Level::Image, Some(a)) => Err(Error::Config(format!(
                "aggregation {a} is meaningless for image-level method {}",
                self.method.method
            ))),
            _ => {
                self.method.window.resolve(self.window)?;
                Ok(())
            }
        }
    }

    /// Aggregation label written to manifests.
    pub fn aggregation_name(&self) -> &'static str {
        self.aggregation.map_or("n/a", AggregationKind::name)
    }

    fn needs_log(&self) -> bool {
        !matches!(self.method.method, Method::Idp | Method::Random)
    }
}

/// A ranking plus the images that were not ranked for lack of annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub scores: BTreeMap<ImageId, f64>,
    pub ranked: RankedList,
    pub unranked: Vec<ImageId>,
}

/// Reads records and feeds them into a builder in line order.
struct Ingest<'d> {
    builder: SeriesBuilder<'d>,
    probs: ProbLengthCheck,
    batch: Vec<(usize, String)>,
}

impl<'d> Ingest<'d> {
    fn new(dataset: &'d DatasetIndex, window: EpochWindow, collect_probs: bool) -> Self {
        Self {
            builder: SeriesBuilder::new(dataset, window, collect_probs),
            probs: ProbLengthCheck::expecting(dataset.num_categories()),
            batch: Vec::with_capacity(BATCH_LINES),
        }
    }

    fn push(&mut self, line_no: usize, line: String) -> Result<(), Error> {
        if line.trim().is_empty() {
            return Ok(());
        }
        self.batch.push((line_no, line));
        if self.batch.len() == BATCH_LINES {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), Error> {
        let dataset = self.builder.dataset();
        let window = self.builder.window();
        let collect = self.builder.collects_probs();
        let probs = self.probs;
        let matched: Vec<Result<(usize, MatchedRecord), Error>> = self
            .batch
            .par_iter()
            .map(|(line_no, line)| {
                let record = parse_log_line(line, *line_no)?;
                let mut check = probs;
                check.check(&record, *line_no)?;
                let m = match_record(dataset, &record, window, collect)?;
                Ok((*line_no, m))
            })
            .collect();
        self.batch.clear();
        for item in matched {
            let (line_no, record) = item?;
            let (epoch, image_id) = (record.epoch, record.image_id);
            self.builder.ingest_matched(record).map_err(|e| match e {
                MatchError::DuplicateRecord { .. } => Error::Format(FormatError::DuplicateRecord {
                    line: line_no,
                    epoch,
                    image_id,
                }),
                other => other.into(),
            })?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SeriesSet<'d>, Error> {
        self.flush()?;
        Ok(self.builder.finish()?)
    }
}

/// Builds per-object series from log lines without keeping the log.
pub fn stream_series<'d, I, S>(
    dataset: &'d DatasetIndex,
    lines: I,
    window: EpochWindow,
    collect_probs: bool,
) -> Result<SeriesSet<'d>, Error>
where
    I: IntoIterator<Item = io::Result<S>>,
    S: Into<String>,
{
    let mut ingest = Ingest::new(dataset, window, collect_probs);
    for (idx, line) in lines.into_iter().enumerate() {
        let line = line.map_err(FormatError::from)?;
        ingest.push(idx + 1, line.into())?;
    }
    ingest.finish()
}

/// Object-level image scores from a finished series set, annotated images
/// only.
pub fn aggregate_series(
    set: &SeriesSet<'_>,
    method: &ScoreMethod,
    aggregation: AggregationKind,
) -> Result<BTreeMap<ImageId, f64>, Error> {
    let images = set.dataset().images();
    let per_image: Vec<Option<Result<(ImageId, f64), Error>>> = (0..images.len())
        .into_par_iter()
        .map(|pos| {
            if !images[pos].is_annotated() {
                return None;
            }
            let series = set.image_series(pos);
            Some(
                score_objects(method, &series)
                    .map_err(Error::from)
                    .and_then(|scores| {
                        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
                        Ok((images[pos].image_id, aggregate(aggregation, &values)?))
                    }),
            )
        })
        .collect();
    per_image.into_iter().flatten().collect()
}

/// Image scores for any method. `lines` is only read when the method uses
/// the log.
pub fn score_images<I, S>(
    dataset: &DatasetIndex,
    lines: I,
    request: &ScoreRequest,
) -> Result<BTreeMap<ImageId, f64>, Error>
where
    I: IntoIterator<Item = io::Result<S>>,
    S: Into<String>,
{
    request.validate()?;
    let method = &request.method;
    match (method.level(), request.aggregation) {
        (Level::Object, Some(agg)) => {
            let set = stream_series(dataset, lines, request.window, method.method.needs_probs())?;
            aggregate_series(&set, method, agg)
        }
        (Level::Image, _) if request.needs_log() => {
            // loss is read at the last epoch only, so only that epoch is
            // tracked
            let end = method.window.resolve(request.window)?.end();
            let end_window = EpochWindow::new(end, end)?;
            let set = stream_series(dataset, lines, end_window, false)?;
            dataset
                .images()
                .iter()
                .enumerate()
                .filter(|(_, im)| im.is_annotated())
                .map(|(pos, im)| {
                    set.loss_at_end(pos)
                        .map(|l| (im.image_id, l))
                        .ok_or_else(|| {
                            ScoreError::MissingLoss {
                                image_id: im.image_id,
                                epoch: end,
                            }
                            .into()
                        })
                })
                .collect()
        }
        _ => Ok(image_level_score(
            method,
            dataset,
            None,
            request.window,
            request.seed,
        )?),
    }
}

/// Scores and ranks every annotated image.
pub fn score_and_rank<I, S>(
    dataset: &DatasetIndex,
    lines: I,
    request: &ScoreRequest,
) -> Result<ScoreOutcome, Error>
where
    I: IntoIterator<Item = io::Result<S>>,
    S: Into<String>,
{
    let scores = score_images(dataset, lines, request)?;
    let ranked = rank(&scores, request.method.direction, request.seed)?;
    Ok(ScoreOutcome {
        scores,
        ranked,
        unranked: dataset.unannotated_image_ids(),
    })
}

/// [`score_and_rank`] over a buffered reader.
pub fn score_reader<R: BufRead>(
    dataset: &DatasetIndex,
    reader: R,
    request: &ScoreRequest,
) -> Result<ScoreOutcome, Error> {
    score_and_rank(dataset, reader.lines(), request)
}

#[derive(Deserialize)]
struct EpochOnly {
    epoch: u32,
}

/// Largest epoch in a log, reading only the `epoch` field of each line.
pub fn scan_max_epoch<R: BufRead>(reader: R) -> Result<u32, FormatError> {
    let mut max = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: EpochOnly = serde_json::from_str(&line).map_err(|e| FormatError::MalformedLine {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        max = max.max(e.epoch);
    }
    Ok(max)
}
