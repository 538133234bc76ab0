//! Induction vectors: a single embedding distilled from a visual map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphcut::{self, DEFAULT_EPSILON, DEFAULT_TAU_M};
use crate::tensor::{gap, masked_gap, EmbeddingVector, FeatureMap, SimilarityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InductionPath {
    /// Global average pooling of the projected map.
    Pooled,
    /// Pooling restricted to the normalized-cut foreground.
    TokenCutMasked,
}

/// Which tokens feed the graph cut on the masked path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutSource {
    Projected,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InductionConfig {
    pub path: InductionPath,
    pub tau_m: f64,
    pub epsilon: f64,
    pub cut_on: CutSource,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            path: InductionPath::Pooled,
            tau_m: DEFAULT_TAU_M,
            epsilon: DEFAULT_EPSILON,
            cut_on: CutSource::Embedding,
        }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 0.0 && self.tau_m < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau_m must lie in (0, 1), got {}",
                self.tau_m
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Result of a foreground cut on one token grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Foreground {
    Mask(SimilarityMap),
    /// The cut degenerated; callers pool the whole map instead.
    Fallback,
}

impl Foreground {
    pub fn mask(&self) -> Option<&SimilarityMap> {
        match self {
            Foreground::Mask(m) => Some(m),
            Foreground::Fallback => None,
        }
    }
}

/// Runs the token cut over the positions of `tokens`.
pub fn foreground_mask(tokens: &FeatureMap, cfg: &InductionConfig) -> Result<Foreground> {
    if tokens.positions() < 2 {
        return Err(Error::ShapeMismatch("token cut needs at least two positions".into()));
    }
    match graphcut::token_cut(
        &tokens.tokens(),
        tokens.height(),
        tokens.width(),
        cfg.tau_m,
        cfg.epsilon,
    ) {
        Ok(cut) if cut.partition.foreground_count() > 0 => Ok(Foreground::Mask(cut.partition.mask)),
        Ok(_) | Err(Error::EmptyPartition) => Ok(Foreground::Fallback),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Induction {
    pub vector: EmbeddingVector,
    /// Mask that produced `vector`; `None` means plain global pooling.
    pub mask: Option<SimilarityMap>,
    pub fallback_used: bool,
}

/// Induction vector of `f`, cutting on `f` itself for the masked path.
pub fn induction_vector(f: &FeatureMap, cfg: &InductionConfig) -> Result<Induction> {
    induction_vector_with_embedding(f, f, cfg)
}

/// Induction vector of the projected map `f`; `embedding` supplies the cut tokens
/// when `cfg.cut_on` is [`CutSource::Embedding`].
pub fn induction_vector_with_embedding(
    f: &FeatureMap,
    embedding: &FeatureMap,
    cfg: &InductionConfig,
) -> Result<Induction> {
    match cfg.path {
        InductionPath::Pooled => Ok(pooled(f)),
        InductionPath::TokenCutMasked => {
            let source = match cfg.cut_on {
                CutSource::Projected => f,
                CutSource::Embedding => embedding,
            };
            if source.height() != f.height() || source.width() != f.width() {
                return Err(Error::ShapeMismatch(format!(
                    "cut grid {}x{} differs from map grid {}x{}",
                    source.height(),
                    source.width(),
                    f.height(),
                    f.width()
                )));
            }
            let fg = foreground_mask(source, cfg)?;
            induction_from_foreground(f, &fg)
        }
    }
}

/// Pools `f` with a precomputed foreground.
pub fn induction_from_foreground(f: &FeatureMap, fg: &Foreground) -> Result<Induction> {
    match fg {
        Foreground::Mask(mask) => match masked_gap(f, mask) {
            Ok(vector) => Ok(Induction {
                vector,
                mask: Some(mask.clone()),
                fallback_used: false,
            }),
            Err(Error::AllZeroMask) => Ok(fallback(f)),
            Err(e) => Err(e),
        },
        Foreground::Fallback => Ok(fallback(f)),
    }
}

fn pooled(f: &FeatureMap) -> Induction {
    Induction {
        vector: gap(f),
        mask: None,
        fallback_used: false,
    }
}

fn fallback(f: &FeatureMap) -> Induction {
    log::debug!("token cut degenerated; falling back to global pooling");
    Induction {
        fallback_used: true,
        ..pooled(f)
    }
}

/// Applies [`induction_vector`] to each map, preserving order.
pub fn batch_induction(batch: &[FeatureMap], cfg: &InductionConfig) -> Result<Vec<Induction>> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    batch
        .iter()
        .enumerate()
        .map(|(k, f)| {
            if !f.same_shape(first) {
                return Err(Error::ShapeMismatch("batch maps differ in shape".into()).at_sample(k));
            }
            induction_vector(f, cfg).map_err(|e| e.at_sample(k))
        })
        .collect()
}

/// Gradient of the induction vector w.r.t. the map it was pooled from.
///
/// Masks are treated as constants.
pub fn induction_backward(
    channels: usize,
    height: usize,
    width: usize,
    mask: Option<&SimilarityMap>,
    grad: &[f64],
) -> Vec<f64> {
    let p = height * width;
    let weights: Vec<f64> = match mask {
        Some(m) => {
            let mass: f64 = m.data().iter().sum();
            m.data().iter().map(|w| w / mass).collect()
        }
        None => vec![1.0 / p as f64; p],
    };
    let mut out = vec![0.0; channels * p];
    for c in 0..channels {
        for (o, w) in out[c * p..(c + 1) * p].iter_mut().zip(&weights) {
            *o = grad[c] * w;
        }
    }
    out
}
