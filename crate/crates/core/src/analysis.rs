//! Post-selection analyses: class-distribution drift, selection overlap,
//! correlation and training-schedule scaling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::datamodel::{CategoryId, DatasetIndex, ImageId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("subset contains no annotations")]
    EmptyDistribution,
    #[error("image {0} is not in the dataset")]
    UnknownImageId(ImageId),
    #[error("distributions are defined over different categories")]
    SupportMismatch,
    #[error("set is empty")]
    EmptySet,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("input is constant")]
    ZeroVariance,
    #[error("prune ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),
}

impl AnalysisError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalysisError::EmptyDistribution => "EmptyDistribution",
            AnalysisError::UnknownImageId(_) => "UnknownImageId",
            AnalysisError::SupportMismatch => "SupportMismatch",
            AnalysisError::EmptySet => "EmptySet",
            AnalysisError::LengthMismatch(..) => "LengthMismatch",
            AnalysisError::TooFewPoints(_) => "LengthMismatch",
            AnalysisError::ZeroVariance => "ZeroVariance",
            AnalysisError::RatioOutOfRange(_) => "RatioOutOfRange",
            AnalysisError::DegenerateSchedule(_) => "DegenerateSchedule",
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            AnalysisError::RatioOutOfRange(_) | AnalysisError::DegenerateSchedule(_)
        )
    }
}

/// Normalized annotation frequencies over every dataset category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probabilities: BTreeMap<CategoryId, f64>,
}

impl ClassDistribution {
    /// Normalizes raw counts. Fails when every count is zero.
    pub fn from_counts(counts: &BTreeMap<CategoryId, u64>) -> Result<Self, AnalysisError> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(AnalysisError::EmptyDistribution);
        }
        Ok(Self {
            probabilities: counts
                .iter()
                .map(|(&c, &n)| (c, n as f64 / total as f64))
                .collect(),
        })
    }

    pub fn probabilities(&self) -> &BTreeMap<CategoryId, f64> {
        &self.probabilities
    }

    pub fn get(&self, category: CategoryId) -> Option<f64> {
        self.probabilities.get(&category).copied()
    }
}

/// Per-category annotation counts over `subset`, with every dataset category
/// present.
pub fn class_counts<'a>(
    dataset: &DatasetIndex,
    subset: impl IntoIterator<Item = &'a ImageId>,
) -> Result<BTreeMap<CategoryId, u64>, AnalysisError> {
    let mut counts: BTreeMap<CategoryId, u64> =
        dataset.categories().keys().map(|&c| (c, 0)).collect();
    let mut seen = HashSet::new();
    for &id in subset {
        if !seen.insert(id) {
            continue;
        }
        let image = dataset.image(id).ok_or(AnalysisError::UnknownImageId(id))?;
        for obj in &image.objects {
            *counts.entry(obj.category).or_default() += 1;
        }
    }
    Ok(counts)
}

pub fn class_distribution<'a>(
    dataset: &DatasetIndex,
    subset: impl IntoIterator<Item = &'a ImageId>,
) -> Result<ClassDistribution, AnalysisError> {
    ClassDistribution::from_counts(&class_counts(dataset, subset)?)
}

/// Total annotation count over `subset`.
pub fn annotation_count<'a>(
    dataset: &DatasetIndex,
    subset: impl IntoIterator<Item = &'a ImageId>,
) -> Result<u64, AnalysisError> {
    Ok(class_counts(dataset, subset)?.values().sum())
}

fn kl_term(a: f64, m: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a / m).log2()
    }
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
pub fn js_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64, AnalysisError> {
    if !p.probabilities.keys().eq(q.probabilities.keys()) {
        return Err(AnalysisError::SupportMismatch);
    }
    let jsd: f64 = p
        .probabilities
        .values()
        .zip(q.probabilities.values())
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_term(a, m) + 0.5 * kl_term(b, m)
        })
        .sum();
    Ok(jsd.clamp(0.0, 1.0))
}

/// `|a ∩ b| / |a ∪ b|` for two image-id sets.
pub fn sample_iou(a: &HashSet<ImageId>, b: &HashSet<ImageId>) -> Result<f64, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySet);
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(AnalysisError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// A step learning-rate schedule: total iterations and decay milestones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    max_iter: u64,
    steps: Vec<u64>,
}

impl Schedule {
    pub fn new(max_iter: u64, steps: Vec<u64>) -> Result<Self, AnalysisError> {
        if max_iter == 0 {
            return Err(AnalysisError::DegenerateSchedule("max_iter is zero".into()));
        }
        if steps.first() == Some(&0) {
            return Err(AnalysisError::DegenerateSchedule(
                "step at iteration zero".into(),
            ));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalysisError::DegenerateSchedule(format!(
                "steps {steps:?} not strictly increasing"
            )));
        }
        if steps.last().is_some_and(|&s| s >= max_iter) {
            return Err(AnalysisError::DegenerateSchedule(format!(
                "steps {steps:?} not below max_iter {max_iter}"
            )));
        }
        Ok(Self { max_iter, steps })
    }

    pub fn max_iter(&self) -> u64 {
        self.max_iter
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.max_iter)?;
        for s in &self.steps {
            write!(f, " {s}")?;
        }
        Ok(())
    }
}

/// Multiplies every field by the kept fraction and rounds to the nearest
/// integer.
pub fn scale_schedule(full: &Schedule, prune_ratio: f64) -> Result<Schedule, AnalysisError> {
    if !(0.0..1.0).contains(&prune_ratio) {
        return Err(AnalysisError::RatioOutOfRange(prune_ratio));
    }
    let keep = 1.0 - prune_ratio;
    let scale = |v: u64| (v as f64 * keep).round() as u64;
    Schedule::new(
        scale(full.max_iter),
        full.steps.iter().map(|&s| scale(s)).collect(),
    )
}
