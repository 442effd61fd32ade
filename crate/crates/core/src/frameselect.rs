//! Information-intensive frame selection: widen the temporal window by a
//! factor alpha, count selected tokens per candidate pair, then draw the
//! training pairs without replacement in proportion to those counts.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_patches, patchify, EmbedError, EmbedWeights, TokenGrid};
use crate::numerics::Real;
use crate::rero::{importance_map, select_rero, MetricKind, ReRoMask, ReroError};
use crate::videodata::{normalize, uniform_indices, ChannelNorm, VideoClip, VideoError};

#[derive(Debug, Error)]
pub enum FrameSelectError {
    #[error("alpha must be >= 1, got {0}")]
    Alpha(f64),
    #[error("cannot draw {tau} pairs from {available} candidates with positive weight")]
    TooFewPairs { tau: usize, available: usize },
    #[error("mask covers {got} pairs, candidate clip has {expected}")]
    Shape { got: usize, expected: usize },
    #[error("invalid selection: {0}")]
    Selection(String),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Rero(#[from] ReroError),
}

/// Evenly spaced candidate frames, `2 * pair_count` of them.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateClip {
    pub clip: VideoClip,
    /// Source frame index of every candidate frame.
    pub frame_indices: Vec<usize>,
    pub pair_count: usize,
    pub tau: usize,
    /// Factor actually used; 1.0 after a fallback.
    pub alpha: f64,
    /// Set when the source was too short for the requested alpha.
    pub fallback: Option<String>,
}

/// Number of candidate pairs `ceil(alpha * tau)`.
pub fn pair_count(tau: usize, alpha: f64) -> usize {
    ((alpha * tau as f64) - 1e-9).ceil().max(tau as f64) as usize
}

/// Takes `2 * ceil(alpha * tau)` frames at the sampling stride starting at
/// `start`. With `alpha = 1` this is exactly uniform sampling. When the
/// source is too short the candidate set falls back to `alpha = 1` and
/// records why.
pub fn expand_candidates(
    source: &VideoClip,
    tau: usize,
    alpha: f64,
    stride: usize,
    start: usize,
) -> Result<CandidateClip, FrameSelectError> {
    if !(alpha >= 1.0) {
        return Err(FrameSelectError::Alpha(alpha));
    }
    let pairs = pair_count(tau, alpha);
    let (frame_indices, pairs, alpha, fallback) = match uniform_indices(source.t_frames, 2 * pairs, stride, start) {
        Ok(idx) => (idx, pairs, alpha, None),
        Err(e) if pairs > tau => {
            let note = format!("alpha {alpha} needs {} frames: {e}; falling back to alpha 1", 2 * pairs);
            warn!("{note}");
            (uniform_indices(source.t_frames, 2 * tau, stride, start)?, tau, 1.0, Some(note))
        }
        Err(e) => return Err(e.into()),
    };
    let clip = source.select_frames(&frame_indices)?;
    Ok(CandidateClip { clip, frame_indices, pair_count: pairs, tau, alpha, fallback })
}

/// Selected-token count per candidate pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairWeights {
    pub counts: Vec<usize>,
}

impl PairWeights {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn count_rero_per_pair(mask: &ReRoMask, candidates: &CandidateClip) -> Result<PairWeights, FrameSelectError> {
    if mask.tau != candidates.pair_count {
        return Err(FrameSelectError::Shape { got: mask.tau, expected: candidates.pair_count });
    }
    Ok(PairWeights { counts: mask.per_pair_counts() })
}

/// Ascending, distinct candidate-pair indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSelection {
    pub pairs: Vec<usize>,
}

/// Pseudo-count added to every pair before sampling.
pub const SMOOTHING: f64 = 1.0;

/// Sequential weighted sampling without replacement: each draw picks a
/// remaining pair with probability proportional to its weight, then
/// removes it. The result is sorted back into temporal order.
pub fn sample_pairs(weights: &PairWeights, tau: usize, seed: u64, smoothing: bool) -> Result<PairSelection, FrameSelectError> {
    let eps = if smoothing { SMOOTHING } else { 0.0 };
    let mut w: Vec<f64> = weights.counts.iter().map(|&c| c as f64 + eps).collect();
    let available = w.iter().filter(|&&x| x > 0.0).count();
    if tau > available {
        return Err(FrameSelectError::TooFewPairs { tau, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(tau);
    for _ in 0..tau {
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < wi {
                break;
            }
            u -= wi;
        }
        let i = pick.expect("a positive weight remains");
        pairs.push(i);
        w[i] = 0.0;
    }
    pairs.sort_unstable();
    Ok(PairSelection { pairs })
}

/// Concatenates the selected candidate pairs into a `2 * tau`-frame clip.
pub fn build_clip(candidates: &CandidateClip, sel: &PairSelection) -> Result<VideoClip, FrameSelectError> {
    if sel.pairs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FrameSelectError::Selection(format!("{:?} is not strictly increasing", sel.pairs)));
    }
    if let Some(&bad) = sel.pairs.iter().find(|&&p| p >= candidates.pair_count) {
        return Err(FrameSelectError::Selection(format!("pair {bad} of {}", candidates.pair_count)));
    }
    let frames: Vec<usize> = sel.pairs.iter().flat_map(|&p| [2 * p, 2 * p + 1]).collect();
    Ok(candidates.clip.select_frames(&frames)?)
}

/// Output of the `frames` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSelectionRecord {
    pub candidate_indices: Vec<usize>,
    pub counts: Vec<usize>,
    pub selected_pairs: Vec<usize>,
}

/// Settings for [`select_informative`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSelectSettings {
    pub tau: usize,
    pub alpha: f64,
    pub stride: usize,
    pub rho_pre: f64,
    pub metric: MetricKind,
    pub smoothing: bool,
}

/// Candidate expansion, token scoring on the candidate grid, weighted pair
/// sampling and assembly, in one call.
#[allow(clippy::too_many_arguments)]
pub fn select_informative<T: Real>(
    source: &VideoClip,
    settings: &FrameSelectSettings,
    start: usize,
    embed: &EmbedWeights<T>,
    patch: usize,
    norm: &ChannelNorm,
    seed: u64,
) -> Result<(VideoClip, FrameSelectionRecord), FrameSelectError> {
    let candidates = expand_candidates(source, settings.tau, settings.alpha, settings.stride, start)?;
    let frames = normalize::<T>(&candidates.clip, norm)?;
    let tokens = embed_patches(&patchify(&frames, patch)?, embed)?;
    let grid = TokenGrid::from_matrix(&tokens, candidates.pair_count, patch, source.height, source.width)?;
    let mask = select_rero(&importance_map(&grid, settings.metric)?, settings.rho_pre)?;
    let weights = count_rero_per_pair(&mask, &candidates)?;
    let sel = sample_pairs(&weights, settings.tau, seed, settings.smoothing)?;
    let clip = build_clip(&candidates, &sel)?;
    let record = FrameSelectionRecord {
        candidate_indices: candidates.frame_indices,
        counts: weights.counts,
        selected_pairs: sel.pairs,
    };
    Ok((clip, record))
}
