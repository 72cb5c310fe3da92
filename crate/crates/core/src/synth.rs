//! Seeded synthetic datasets and prediction logs with known per-object
//! training dynamics.
//!
//! Every image is a 640x640 canvas split into a 4x4 grid; each object and
//! each distractor prediction owns one cell, so a prediction overlaps only
//! its own ground-truth box. A prediction shares the top-left corner and the
//! height of its box and is `t` times as wide, which gives an IoU of `t`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    write_log_line, CategoryId, DatasetIndex, EpochImageLog, GroundTruthObject, ImageId,
    ImageRecord, ObjectId, Prediction, PredictionLog,
};
use crate::geometry::{iou, BBox};

pub const CANVAS: f64 = 640.0;
pub const GRID: usize = 4;
pub const CELL: f64 = CANVAS / GRID as f64;
pub const MAX_CELLS: usize = GRID * GRID;

/// Smallest IoU ever injected, so every prediction strictly overlaps its box.
pub const MIN_IOU: f64 = 0.01;

/// Object ids are `image_id * OBJECT_ID_STRIDE + k`.
pub const OBJECT_ID_STRIDE: u64 = 100;

pub const TRUTH_HEADER: &str = "object_id,iou_mean,iou_std,conf_mean,conf_std,forgetting";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("no series of length {len} in [{lo}, {hi}] has mean {mean} and std {std}")]
    InfeasibleProfile {
        mean: f64,
        std: f64,
        len: usize,
        lo: f64,
        hi: f64,
    },
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("write failed: {0}")]
    Io(String),
}

impl SynthError {
    pub fn code(&self) -> &'static str {
        match self {
            SynthError::InfeasibleProfile { .. } => "InfeasibleProfile",
            SynthError::InvalidConfig(_) => "InvalidConfig",
            SynthError::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
    Ambiguous,
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
            Difficulty::Ambiguous => "ambiguous",
        }
    }
}

/// Inclusive range a value is drawn uniformly from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn draw(self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn is_valid(self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Ranges for an object's injected iou and confidence statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyProfile {
    pub iou_mean: Span,
    pub iou_std: Span,
    pub conf_mean: Span,
    pub conf_std: Span,
    /// Per-epoch probability that the predicted class is the true class.
    pub p_correct: f64,
    /// Fraction of objects whose iou and confidence stay constant.
    pub constant_fraction: f64,
}

impl DifficultyProfile {
    /// High, stable iou; always the right class.
    pub const EASY: Self = Self {
        iou_mean: Span::new(0.75, 0.92),
        iou_std: Span::new(0.0, 0.03),
        conf_mean: Span::new(0.7, 0.95),
        conf_std: Span::new(0.0, 0.03),
        p_correct: 1.0,
        constant_fraction: 0.25,
    };

    /// Low, stable iou; mostly the wrong class.
    pub const HARD: Self = Self {
        iou_mean: Span::new(0.08, 0.3),
        iou_std: Span::new(0.0, 0.03),
        conf_mean: Span::new(0.05, 0.3),
        conf_std: Span::new(0.0, 0.03),
        p_correct: 0.1,
        constant_fraction: 0.0,
    };

    /// Mid-range iou and confidence that swing from epoch to epoch.
    pub const AMBIGUOUS: Self = Self {
        iou_mean: Span::new(0.35, 0.65),
        iou_std: Span::new(0.1, 0.3),
        conf_mean: Span::new(0.3, 0.7),
        conf_std: Span::new(0.1, 0.3),
        p_correct: 0.5,
        constant_fraction: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub num_classes: u32,
    pub epochs: u32,
    /// Inclusive; a minimum of 0 yields some unannotated images.
    pub objects_per_image: (usize, usize),
    /// Fractions of easy, hard and ambiguous objects; must sum to 1.
    pub mix: [f64; 3],
    pub easy: DifficultyProfile,
    pub hard: DifficultyProfile,
    pub ambiguous: DifficultyProfile,
    /// Non-overlapping false positives added to every record.
    pub distractors_per_image: usize,
    pub with_probs: bool,
    pub with_loss: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            num_classes: 5,
            epochs: 12,
            objects_per_image: (1, 6),
            mix: [0.4, 0.3, 0.3],
            easy: DifficultyProfile::EASY,
            hard: DifficultyProfile::HARD,
            ambiguous: DifficultyProfile::AMBIGUOUS,
            distractors_per_image: 1,
            with_probs: true,
            with_loss: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.num_images == 0 || self.num_classes == 0 || self.epochs == 0 {
            return bad("images, classes and epochs must be positive".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return bad(format!("objects per image {lo}..={hi} is empty"));
        }
        if hi + self.distractors_per_image > MAX_CELLS {
            return bad(format!(
                "{hi} objects plus {} distractors exceed {MAX_CELLS} cells",
                self.distractors_per_image
            ));
        }
        if self.mix.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "difficulty mix {:?} must be fractions summing to 1",
                self.mix
            ));
        }
        for (profile, weight) in [self.easy, self.hard, self.ambiguous].iter().zip(self.mix) {
            if weight > 0.0 {
                self.check_profile(profile)?;
            }
        }
        Ok(())
    }

    fn check_profile(&self, p: &DifficultyProfile) -> Result<(), SynthError> {
        let spans = [p.iou_mean, p.iou_std, p.conf_mean, p.conf_std];
        if spans.iter().any(|s| !s.is_valid())
            || !(0.0..=1.0).contains(&p.p_correct)
            || !(0.0..=1.0).contains(&p.constant_fraction)
        {
            return Err(SynthError::InvalidConfig(format!(
                "malformed profile {p:?}"
            )));
        }
        let len = self.epochs as usize;
        for (mean, std, lo) in [
            (p.iou_mean, p.iou_std, MIN_IOU),
            (p.conf_mean, p.conf_std, 0.0),
        ] {
            // the bound (m - lo)(hi - m) is concave in m, so the endpoints
            // of the mean range are the binding cases
            for m in [mean.lo, mean.hi] {
                let fail = SynthError::InfeasibleProfile {
                    mean: m,
                    std: std.hi,
                    len,
                    lo,
                    hi: 1.0,
                };
                if !(lo..=1.0).contains(&m) || std.lo < 0.0 {
                    return Err(fail);
                }
                if std.hi * std.hi > (m - lo) * (1.0 - m) || (len < 2 && std.hi > 0.0) {
                    return Err(fail);
                }
            }
        }
        Ok(())
    }

    fn profile(&self, d: Difficulty) -> &DifficultyProfile {
        match d {
            Difficulty::Easy => &self.easy,
            Difficulty::Hard => &self.hard,
            Difficulty::Ambiguous => &self.ambiguous,
        }
    }
}

fn plain_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn plain_std(v: &[f64]) -> f64 {
    if v.iter().all(|&x| x == v[0]) {
        return 0.0;
    }
    let m = plain_mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Draws a length-`len` series in `[lo, hi]` whose population mean and
/// standard deviation equal `mean` and `std` up to rounding.
///
/// A random standardized shape is tried first; if it leaves the bounds the
/// series falls back to two levels `mean + std*sqrt((len-n)/n)` (n times)
/// and `mean - std*sqrt(n/(len-n))`.
pub fn profile_series(
    rng: &mut impl Rng,
    mean: f64,
    std: f64,
    len: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<f64>, SynthError> {
    let infeasible = SynthError::InfeasibleProfile {
        mean,
        std,
        len,
        lo,
        hi,
    };
    if len == 0 || !(lo..=hi).contains(&mean) || std < 0.0 || std * std > (mean - lo) * (hi - mean)
    {
        return Err(infeasible);
    }
    if std == 0.0 {
        return Ok(vec![mean; len]);
    }
    if len < 2 {
        return Err(infeasible);
    }
    let in_bounds = |v: &[f64]| v.iter().all(|x| (lo..=hi).contains(x));
    for _ in 0..8 {
        let raw: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
        let (m, s) = (plain_mean(&raw), plain_std(&raw));
        if s == 0.0 {
            continue;
        }
        let v: Vec<f64> = raw.iter().map(|x| mean + std * (x - m) / s).collect();
        if in_bounds(&v) {
            return Ok(v);
        }
    }
    let mut counts: Vec<usize> = (1..len).collect();
    counts.shuffle(rng);
    for n in counts {
        let (nf, rest) = (n as f64, (len - n) as f64);
        let high = mean + std * (rest / nf).sqrt();
        let low = mean - std * (nf / rest).sqrt();
        if high <= hi && low >= lo {
            let mut v = vec![high; n];
            v.resize(len, low);
            v.shuffle(rng);
            return Ok(v);
        }
    }
    Err(infeasible)
}

fn quantize(v: f64) -> f64 {
    // multiples of 1/8 keep box arithmetic exact through xywh round-trips
    (v * 8.0).round() / 8.0
}

fn cell_box(rng: &mut impl Rng, cell: usize) -> BBox {
    let (cx, cy) = ((cell % GRID) as f64 * CELL, (cell / GRID) as f64 * CELL);
    let w = quantize(rng.gen_range(32.0..150.0));
    let h = quantize(rng.gen_range(32.0..150.0));
    let x = quantize(cx + rng.gen::<f64>() * (CELL - w));
    let y = quantize(cy + rng.gen::<f64>() * (CELL - h));
    BBox::from_xywh(x, y, w, h).expect("cell box is valid")
}

fn other_category(rng: &mut impl Rng, category: CategoryId, num_classes: u32) -> CategoryId {
    let shift = rng.gen_range(1..num_classes) as u64;
    CategoryId((category.0 - 1 + shift) % num_classes as u64 + 1)
}

/// Ground-truth object with its per-epoch injected behaviour.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPlan {
    pub gt: GroundTruthObject,
    pub difficulty: Difficulty,
    /// Requested IoU per epoch.
    pub iou_target: Vec<f64>,
    /// IoU of the emitted box, equal to the target up to rounding.
    pub iou: Vec<f64>,
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
    pub pred_category: Vec<CategoryId>,
    pub pred_box: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlan {
    pub record: ImageRecord,
    pub objects: Vec<ObjectPlan>,
    pub distractors: Vec<(BBox, CategoryId, f64)>,
}

/// Deterministic, lazily evaluated generator for one config.
#[derive(Debug, Clone)]
pub struct Generator {
    config: SynthConfig,
}

impl Generator {
    pub fn new(config: SynthConfig) -> Result<Self, SynthError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn categories(&self) -> BTreeMap<CategoryId, String> {
        (1..=self.config.num_classes as u64)
            .map(|c| (CategoryId(c), format!("class{c}")))
            .collect()
    }

    /// Plans image `index` (0-based; its id is `index + 1`). Depends only on
    /// the seed and the index.
    pub fn plan(&self, index: usize) -> Result<ImagePlan, SynthError> {
        let cfg = &self.config;
        let image_id = ImageId(index as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(image_id.0);
        let len = cfg.epochs as usize;

        let n_objects = rng.gen_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
        let mut cells: Vec<usize> = (0..MAX_CELLS).collect();
        cells.shuffle(&mut rng);

        let mut objects = Vec::with_capacity(n_objects);
        for (k, &cell) in cells[..n_objects].iter().enumerate() {
            let bbox = cell_box(&mut rng, cell);
            let category = CategoryId(rng.gen_range(1..=cfg.num_classes as u64));
            let u: f64 = rng.gen();
            let difficulty = if u < cfg.mix[0] {
                Difficulty::Easy
            } else if u < cfg.mix[0] + cfg.mix[1] {
                Difficulty::Hard
            } else {
                Difficulty::Ambiguous
            };
            let p = cfg.profile(difficulty);
            let constant = rng.gen::<f64>() < p.constant_fraction;
            let (iou_mean, conf_mean) = (p.iou_mean.draw(&mut rng), p.conf_mean.draw(&mut rng));
            let (iou_std, conf_std) = if constant {
                (0.0, 0.0)
            } else {
                (p.iou_std.draw(&mut rng), p.conf_std.draw(&mut rng))
            };
            let iou_target = profile_series(&mut rng, iou_mean, iou_std, len, MIN_IOU, 1.0)?;
            let confidence = profile_series(&mut rng, conf_mean, conf_std, len, 0.0, 1.0)?;
            let correct: Vec<bool> = if cfg.num_classes < 2 {
                vec![true; len]
            } else {
                (0..len).map(|_| rng.gen::<f64>() < p.p_correct).collect()
            };
            let pred_category = correct
                .iter()
                .map(|&c| {
                    if c {
                        category
                    } else {
                        other_category(&mut rng, category, cfg.num_classes)
                    }
                })
                .collect();
            let pred_box: Vec<BBox> = iou_target
                .iter()
                .map(|&t| {
                    BBox::new(
                        bbox.x_min(),
                        bbox.y_min(),
                        bbox.x_min() + bbox.width() * t,
                        bbox.y_max(),
                    )
                    .expect("shrunk box is valid")
                })
                .collect();
            let realized = pred_box.iter().map(|b| iou(&bbox, b)).collect();
            objects.push(ObjectPlan {
                gt: GroundTruthObject {
                    object_id: ObjectId(image_id.0 * OBJECT_ID_STRIDE + k as u64),
                    bbox,
                    category,
                },
                difficulty,
                iou_target,
                iou: realized,
                confidence,
                correct,
                pred_category,
                pred_box,
            });
        }

        let distractors = cells[n_objects..n_objects + cfg.distractors_per_image]
            .iter()
            .map(|&cell| {
                let b = cell_box(&mut rng, cell);
                let c = CategoryId(rng.gen_range(1..=cfg.num_classes as u64));
                (b, c, rng.gen_range(0.05..0.3))
            })
            .collect();

        Ok(ImagePlan {
            record: ImageRecord {
                image_id,
                file_name: format!("{:06}.jpg", image_id.0),
                width: Some(CANVAS as u32),
                height: Some(CANVAS as u32),
                objects: objects.iter().map(|o| o.gt.clone()).collect(),
            },
            objects,
            distractors,
        })
    }

    fn probs(&self, category: CategoryId, confidence: f64) -> Option<Vec<f64>> {
        if !self.config.with_probs {
            return None;
        }
        let c = self.config.num_classes as usize;
        if c == 1 {
            return Some(vec![1.0]);
        }
        let rest = (1.0 - confidence) / (c - 1) as f64;
        let mut v = vec![rest; c];
        v[category.0 as usize - 1] = confidence;
        Some(v)
    }

    /// The log record of a planned image at `epoch` (1-based).
    pub fn record(&self, plan: &ImagePlan, epoch: u32) -> EpochImageLog {
        let e = epoch as usize - 1;
        let mut predictions: Vec<Prediction> = plan
            .objects
            .iter()
            .map(|o| Prediction {
                bbox: o.pred_box[e],
                category: o.pred_category[e],
                confidence: o.confidence[e],
                probs: self.probs(o.pred_category[e], o.confidence[e]),
            })
            .collect();
        predictions.extend(
            plan.distractors
                .iter()
                .map(|&(bbox, category, confidence)| Prediction {
                    bbox,
                    category,
                    confidence,
                    probs: self.probs(category, confidence),
                }),
        );
        let loss = self
            .config
            .with_loss
            .then(|| plan.objects.iter().map(|o| 1.0 - o.iou[e]).sum::<f64>());
        EpochImageLog {
            epoch,
            image_id: plan.record.image_id,
            predictions,
            loss,
        }
    }

    pub fn dataset(&self) -> Result<DatasetIndex, SynthError> {
        let images = (0..self.config.num_images)
            .map(|i| self.plan(i).map(|p| p.record))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DatasetIndex::new(images, self.categories()).expect("generated dataset is valid"))
    }

    pub fn truth(&self) -> Result<SynthTruth, SynthError> {
        let mut objects = Vec::new();
        for i in 0..self.config.num_images {
            let plan = self.plan(i)?;
            objects.extend(
                plan.objects
                    .iter()
                    .map(|o| ObjectTruth::of(plan.record.image_id, o)),
            );
        }
        Ok(SynthTruth { objects })
    }

    /// All records, epoch-major, planning each image again per epoch so
    /// memory stays flat.
    pub fn records(&self) -> impl Iterator<Item = Result<EpochImageLog, SynthError>> + '_ {
        (1..=self.config.epochs).flat_map(move |epoch| {
            (0..self.config.num_images).map(move |i| Ok(self.record(&self.plan(i)?, epoch)))
        })
    }

    /// Streams the log as JSON lines.
    pub fn write_log(&self, mut out: impl Write) -> Result<(), SynthError> {
        for record in self.records() {
            let line = write_log_line(&record?);
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Injected statistics of one object, computed from the emitted series.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    pub object_id: ObjectId,
    pub image_id: ImageId,
    pub difficulty: Difficulty,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub conf_mean: f64,
    pub conf_std: f64,
    pub correct: Vec<bool>,
    pub forgetting: u32,
}

impl ObjectTruth {
    fn of(image_id: ImageId, o: &ObjectPlan) -> Self {
        let forgetting = o.correct.windows(2).filter(|w| w[0] && !w[1]).count() as u32;
        Self {
            object_id: o.gt.object_id,
            image_id,
            difficulty: o.difficulty,
            iou_mean: plain_mean(&o.iou),
            iou_std: plain_std(&o.iou),
            conf_mean: plain_mean(&o.confidence),
            conf_std: plain_std(&o.confidence),
            correct: o.correct.clone(),
            forgetting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthTruth {
    pub objects: Vec<ObjectTruth>,
}

impl SynthTruth {
    /// Largest injected iou std per image.
    pub fn image_max_iou_std(&self) -> BTreeMap<ImageId, f64> {
        let mut out: BTreeMap<ImageId, f64> = BTreeMap::new();
        for o in &self.objects {
            let e = out.entry(o.image_id).or_insert(f64::NEG_INFINITY);
            *e = e.max(o.iou_std);
        }
        out
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = String::from(TRUTH_HEADER);
        out.push('\n');
        for o in &self.objects {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                o.object_id, o.iou_mean, o.iou_std, o.conf_mean, o.conf_std, o.forgetting
            ));
        }
        out.into_bytes()
    }
}

/// Materializes dataset, log and truth in memory.
pub fn generate(
    config: SynthConfig,
) -> Result<(DatasetIndex, PredictionLog, SynthTruth), SynthError> {
    let generator = Generator::new(config)?;
    let mut log = PredictionLog::new();
    for record in generator.records() {
        log.insert(record?).expect("generated records are unique");
    }
    Ok((generator.dataset()?, log, generator.truth()?))
}
