//! Training-dynamics based dataset pruning for object detection.
//!
//! Per-epoch detector outputs are matched to ground-truth objects, reduced to
//! per-object scores, aggregated per image, ranked and cut to a kept subset.

pub mod analysis;
pub mod datamodel;
pub mod geometry;
pub mod matching;
pub mod pipeline;
pub mod ranking;
pub mod scoring;
pub mod synth;

pub use analysis::AnalysisError;
pub use datamodel::FormatError;
pub use matching::MatchError;
pub use ranking::RankError;
pub use scoring::ScoreError;
pub use synth::SynthError;

/// Any error produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable error name.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Format(e) => e.code(),
            Error::Match(e) => e.code(),
            Error::Score(e) => e.code(),
            Error::Rank(e) => e.code(),
            Error::Analysis(e) => e.code(),
            Error::Synth(e) => e.code(),
            Error::Config(_) => "InvalidConfig",
        }
    }

    /// True when the error stems from invalid settings rather than bad input
    /// data.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Score(e) => e.is_config(),
            Error::Rank(e) => matches!(
                e,
                RankError::RatioOutOfRange(_) | RankError::UnknownName { .. }
            ),
            Error::Analysis(e) => e.is_config(),
            Error::Match(e) => matches!(
                e,
                MatchError::InvalidWindow(_) | MatchError::WindowExceedsLog { .. }
            ),
            Error::Synth(_) => true,
            Error::Config(_) => true,
            Error::Format(_) => false,
        }
    }
}
