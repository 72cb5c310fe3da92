//! Image-level aggregation, seeded ranking and prefix selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{ImageId, PruneManifest, ScoreRow, MANIFEST_FORMAT_VERSION};
use crate::scoring::ObjectScore;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RankError {
    #[error("image has no object scores to aggregate")]
    EmptyObjectList,
    #[error("image {0} has a non-finite score")]
    NonFiniteScore(ImageId),
    #[error("prune ratio {0} outside [0, 1)")]
    RatioOutOfRange(f64),
    #[error("unknown {kind} {value:?}")]
    UnknownName { kind: &'static str, value: String },
}

impl RankError {
    pub fn code(&self) -> &'static str {
        match self {
            RankError::EmptyObjectList => "EmptyObjectList",
            RankError::NonFiniteScore(_) => "NonFiniteScore",
            RankError::RatioOutOfRange(_) => "RatioOutOfRange",
            RankError::UnknownName { .. } => "UnknownName",
        }
    }
}

/// Which end of the score order is kept first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    KeepHighFirst,
    KeepLowFirst,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::KeepHighFirst => "high",
            Direction::KeepLowFirst => "low",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "high" | "desc" | "descending" => Ok(Direction::KeepHighFirst),
            "low" | "asc" | "ascending" => Ok(Direction::KeepLowFirst),
            _ => Err(RankError::UnknownName {
                kind: "direction",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationKind {
    Mean,
    Sum,
    Max,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 3] = [
        AggregationKind::Mean,
        AggregationKind::Sum,
        AggregationKind::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationKind::Mean => "mean",
            AggregationKind::Sum => "sum",
            AggregationKind::Max => "max",
        }
    }
}

impl fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationKind {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggregationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RankError::UnknownName {
                kind: "aggregation",
                value: s.to_string(),
            })
    }
}

/// Reduces the object scores of one image to the image score.
pub fn aggregate(kind: AggregationKind, scores: &[f64]) -> Result<f64, RankError> {
    if scores.is_empty() {
        return Err(RankError::EmptyObjectList);
    }
    let sum: f64 = scores.iter().sum();
    Ok(match kind {
        AggregationKind::Sum => sum,
        AggregationKind::Mean => sum / scores.len() as f64,
        AggregationKind::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Groups object scores by image and aggregates each group.
pub fn aggregate_objects(
    kind: AggregationKind,
    scores: &[ObjectScore],
) -> Result<BTreeMap<ImageId, f64>, RankError> {
    let mut grouped: BTreeMap<ImageId, Vec<f64>> = BTreeMap::new();
    for s in scores {
        grouped.entry(s.image_id).or_default().push(s.value);
    }
    grouped
        .into_iter()
        .map(|(id, values)| Ok((id, aggregate(kind, &values)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub image_id: ImageId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Images in keep-first order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    /// `None` when the list was read back from a scores file.
    pub direction: Option<Direction>,
    pub seed: u64,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn order(&self) -> Vec<ImageId> {
        self.entries.iter().map(|e| e.image_id).collect()
    }

    pub fn to_rows(&self) -> Vec<ScoreRow> {
        self.entries
            .iter()
            .map(|e| ScoreRow {
                image_id: e.image_id,
                score: e.score,
                rank: e.rank,
            })
            .collect()
    }

    /// Rebuilds a list from scores-file rows already in rank order.
    pub fn from_rows(rows: &[ScoreRow], seed: u64) -> Self {
        Self {
            entries: rows
                .iter()
                .map(|r| RankedEntry {
                    image_id: r.image_id,
                    score: r.score,
                    rank: r.rank,
                })
                .collect(),
            direction: None,
            seed,
        }
    }
}

/// Sorts images by score. Exact ties are shuffled with a generator seeded by
/// `seed`, applied group by group after sorting ids ascending, so the result
/// does not depend on map iteration order.
pub fn rank(
    scores: &BTreeMap<ImageId, f64>,
    direction: Direction,
    seed: u64,
) -> Result<RankedList, RankError> {
    let mut items: Vec<(ImageId, f64)> = Vec::with_capacity(scores.len());
    for (&id, &score) in scores {
        if !score.is_finite() {
            return Err(RankError::NonFiniteScore(id));
        }
        // folds -0.0 into 0.0 so the two compare as a tie
        items.push((id, score + 0.0));
    }
    items.sort_by_key(|(id, _)| *id);
    match direction {
        Direction::KeepHighFirst => items.sort_by(|a, b| b.1.total_cmp(&a.1)),
        Direction::KeepLowFirst => items.sort_by(|a, b| a.1.total_cmp(&b.1)),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    while start < items.len() {
        let mut end = start + 1;
        while end < items.len() && items[end].1 == items[start].1 {
            end += 1;
        }
        if end - start > 1 {
            items[start..end].shuffle(&mut rng);
        }
        start = end;
    }
    Ok(RankedList {
        entries: items
            .into_iter()
            .enumerate()
            .map(|(pos, (image_id, score))| RankedEntry {
                image_id,
                score,
                rank: pos + 1,
            })
            .collect(),
        direction: Some(direction),
        seed,
    })
}

/// `ceil((1 - ratio) * n)`, with products within rounding noise of an
/// integer snapped to it (so `1 - 0.7` times 100 keeps 30, not 31).
pub fn keep_count(n: usize, prune_ratio: f64) -> Result<usize, RankError> {
    if !(0.0..1.0).contains(&prune_ratio) {
        return Err(RankError::RatioOutOfRange(prune_ratio));
    }
    let exact = (1.0 - prune_ratio) * n as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        exact.ceil()
    };
    Ok((k as usize).min(n))
}

/// Keeps the first `keep_count` images of the ranking.
pub fn select(
    ranked: &RankedList,
    prune_ratio: f64,
    method: &str,
    aggregation: &str,
) -> Result<PruneManifest, RankError> {
    let k = keep_count(ranked.len(), prune_ratio)?;
    let mut kept: Vec<ImageId> = ranked.entries[..k].iter().map(|e| e.image_id).collect();
    kept.sort_unstable();
    Ok(PruneManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        method: method.to_string(),
        aggregation: aggregation.to_string(),
        prune_ratio,
        seed: ranked.seed,
        kept_image_ids: kept,
        unranked_image_ids: None,
    })
}
