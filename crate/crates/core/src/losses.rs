//! Visual infoNCE, visually weighted audio contrastive loss, and their sum.
//!
//! Gradient routing follows the stop-grad contract: the audio loss treats
//! induction vectors and the weights `γ` as constants, and the visual loss
//! treats the induction vectors as a fixed bootstrap target. With stop-grad
//! disabled the audio loss additionally reaches the visual maps through the
//! induction vectors (but never through `γ`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::induction::{induction_backward, Induction};
use crate::tensor::{cosine_similarity_guarded, EmbeddingVector, FeatureMap, SimilarityMap};
use crate::trimap::{build_batch_tensor, cosine_row_backward, BatchPooling, ThresholdConfig};

pub const DEFAULT_TAU_C: f64 = 0.07;
pub const DEFAULT_THETA: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_c: f64,
    pub theta: f64,
    pub weighted: bool,
    pub stop_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_c: DEFAULT_TAU_C,
            theta: DEFAULT_THETA,
            weighted: true,
            stop_grad: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_c > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tau_c must be positive, got {}",
                self.tau_c
            )));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "theta must be non-negative, got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualLoss {
    pub value: f64,
    /// Row-major `∂L_v/∂SP`.
    pub d_sp: Vec<f64>,
    /// Row-major `∂L_v/∂SN`.
    pub d_sn: Vec<f64>,
}

/// infoNCE over `SP`/`SN` (row-major `n x n`); both denominators sum over every `j`.
pub fn visual_loss(sp: &[f64], sn: &[f64], n: usize, tau_c: f64) -> Result<VisualLoss> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if sp.len() != n * n || sn.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "SP/SN need {} entries, got {} and {}",
            n * n,
            sp.len(),
            sn.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_sp = vec![0.0; n * n];
    let mut d_sn = vec![0.0; n * n];
    for i in 0..n {
        let row_p = &sp[i * n..(i + 1) * n];
        let row_n = &sn[i * n..(i + 1) * n];
        let max = row_p.iter().chain(row_n).fold(f64::NEG_INFINITY, |m, &x| m.max(x)) / tau_c;
        let mut z = 0.0;
        for x in row_p.iter().chain(row_n) {
            z += (x / tau_c - max).exp();
        }
        let lse = max + z.ln();
        value += lse - row_p[i] / tau_c;
        for j in 0..n {
            d_sp[i * n + j] = inv_n * (row_p[j] / tau_c - lse).exp() / tau_c;
            d_sn[i * n + j] = inv_n * (row_n[j] / tau_c - lse).exp() / tau_c;
        }
        d_sp[i * n + i] -= inv_n / tau_c;
    }
    value *= inv_n;
    if !value.is_finite() {
        return Err(Error::NonFinite("visual loss"));
    }
    Ok(VisualLoss { value, d_sp, d_sn })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioLoss {
    pub value: f64,
    /// `∂L_a/∂f^a` per sample.
    pub d_audio: Vec<Vec<f64>>,
    /// `∂L_a/∂f^ind` per sample; identically zero under stop-grad.
    pub d_induction: Vec<Vec<f64>>,
    /// Hinge arguments per sample (before `max(0, ·)`).
    pub pre_hinge: Vec<f64>,
    /// Row-major `γ` weights actually used.
    pub gamma: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Visually weighted margin loss between induction vectors and audio vectors.
///
/// With `weighted` off every `γ` is 1. A batch of one has no negative term.
pub fn audio_loss(
    induction: &[EmbeddingVector],
    audio: &[EmbeddingVector],
    theta: f64,
    weighted: bool,
    stop_grad: bool,
) -> Result<AudioLoss> {
    let n = induction.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if audio.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} induction vectors but {} audio vectors",
            audio.len()
        )));
    }
    let dim = induction[0].dim();
    if induction.iter().chain(audio).any(|v| v.dim() != dim) {
        return Err(Error::ShapeMismatch("induction and audio dims differ".into()));
    }

    let mut gamma = vec![1.0; n * n];
    if weighted {
        for i in 0..n {
            for j in 0..n {
                gamma[i * n + j] = -cosine_similarity_guarded(induction[i].as_slice(), induction[j].as_slice());
            }
        }
    }
    let neg_scale = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let mut eu = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            eu[i * n + j] = squared_distance(induction[i].as_slice(), audio[j].as_slice());
        }
    }
    let pre_hinge: Vec<f64> = (0..n)
        .map(|i| {
            let negatives: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| gamma[i * n + j] * eu[i * n + j])
                .sum();
            eu[i * n + i] - neg_scale * negatives + theta
        })
        .collect();
    let inv_n = 1.0 / n as f64;
    let value = pre_hinge.iter().map(|&p| p.max(0.0)).sum::<f64>() * inv_n;

    let mut d_audio = vec![vec![0.0; dim]; n];
    let mut d_induction = vec![vec![0.0; dim]; n];
    for i in 0..n {
        if pre_hinge[i] <= 0.0 {
            continue;
        }
        let fi = induction[i].as_slice();
        // Eu_ii = |f_i - a_i|²
        for (k, g) in d_audio[i].iter_mut().enumerate() {
            *g -= 2.0 * inv_n * (fi[k] - audio[i][k]);
        }
        if !stop_grad {
            for (k, g) in d_induction[i].iter_mut().enumerate() {
                *g += 2.0 * inv_n * (fi[k] - audio[i][k]);
            }
        }
        for j in (0..n).filter(|&j| j != i) {
            let w = neg_scale * gamma[i * n + j] * inv_n;
            if w == 0.0 {
                continue;
            }
            for (k, g) in d_audio[j].iter_mut().enumerate() {
                *g += 2.0 * w * (fi[k] - audio[j][k]);
            }
            if !stop_grad {
                for (k, g) in d_induction[i].iter_mut().enumerate() {
                    *g -= 2.0 * w * (fi[k] - audio[j][k]);
                }
            }
        }
    }
    Ok(AudioLoss {
        value,
        d_audio,
        d_induction,
        pre_hinge,
        gamma,
    })
}

/// How `SP`/`SN` are pooled from the batch similarity tensor.
#[derive(Debug, Clone)]
pub enum VisualPooling {
    TriMap(ThresholdConfig),
    /// Per-sample foreground masks (`None` pools the whole map).
    BiMap(Vec<Option<SimilarityMap>>),
}

/// Which loss terms contribute to the returned value and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub visual: bool,
    pub audio: bool,
}

impl LossTerms {
    pub const BOTH: Self = Self {
        visual: true,
        audio: true,
    };
    pub const VISUAL_ONLY: Self = Self {
        visual: true,
        audio: false,
    };
    pub const AUDIO_ONLY: Self = Self {
        visual: false,
        audio: true,
    };
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::BOTH
    }
}

/// Loss value and gradients routed to each modality.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub visual_loss: f64,
    pub audio_loss: f64,
    /// `∂L/∂f^v` per sample, channel-major like the maps.
    pub grad_visual: Vec<Vec<f64>>,
    /// `∂L/∂f^a` per sample.
    pub grad_audio: Vec<Vec<f64>>,
    /// What the audio loss sends back into the induction vectors.
    pub induction_grad_from_audio_loss: Vec<Vec<f64>>,
    /// What the visual loss sends to the audio vectors (always zero).
    pub audio_grad_from_visual_loss: Vec<Vec<f64>>,
    pub pre_hinge: Vec<f64>,
    pub sp: Vec<f64>,
    pub sn: Vec<f64>,
    /// Distance from the tri-map thresholds to the nearest order swap.
    pub threshold_margin: f64,
}

/// `L = L_v + L_a` with gradients for the projected visual maps and audio vectors.
pub fn total_loss(
    visual: &[FeatureMap],
    inductions: &[Induction],
    audio: &[EmbeddingVector],
    pooling: &VisualPooling,
    cfg: &LossConfig,
    terms: LossTerms,
) -> Result<LossOutput> {
    let n = visual.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if inductions.len() != n || audio.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "batch of {n} maps with {} induction and {} audio vectors",
            inductions.len(),
            audio.len()
        )));
    }
    let ind_vectors: Vec<EmbeddingVector> = inductions.iter().map(|ind| ind.vector.clone()).collect();
    let dim = ind_vectors[0].dim();

    let tensor = build_batch_tensor(visual, &ind_vectors)?;
    let pooled = match pooling {
        VisualPooling::TriMap(th) => BatchPooling::trimap(&tensor, th),
        VisualPooling::BiMap(masks) => BatchPooling::bimap(&tensor, masks)?,
    };
    let (sp, sn) = (pooled.sp(), pooled.sn());
    let lv = visual_loss(&sp, &sn, n, cfg.tau_c)?;
    let la = audio_loss(&ind_vectors, audio, cfg.theta, cfg.weighted, cfg.stop_grad)?;

    let mut grad_visual: Vec<Vec<f64>> = visual.iter().map(|f| vec![0.0; f.data().len()]).collect();
    if terms.visual {
        let grad_maps = pooled.backward(&tensor, &lv.d_sp, &lv.d_sn);
        let queries: Vec<&[f64]> = ind_vectors.iter().map(EmbeddingVector::as_slice).collect();
        for (i, f) in visual.iter().enumerate() {
            let norms = f.position_norms();
            let s_row: Vec<&SimilarityMap> = (0..n).map(|j| tensor.map(i, j)).collect();
            let g_row: Vec<&[f64]> = grad_maps[i * n..(i + 1) * n].iter().map(Vec::as_slice).collect();
            cosine_row_backward(f, &norms, &queries, &s_row, &g_row, &mut grad_visual[i]);
        }
    }
    if terms.audio && !cfg.stop_grad {
        for (i, f) in visual.iter().enumerate() {
            let back = induction_backward(
                f.channels(),
                f.height(),
                f.width(),
                inductions[i].mask.as_ref(),
                &la.d_induction[i],
            );
            for (g, b) in grad_visual[i].iter_mut().zip(back) {
                *g += b;
            }
        }
    }
    let grad_audio = if terms.audio {
        la.d_audio.clone()
    } else {
        vec![vec![0.0; dim]; n]
    };

    let visual_value = if terms.visual { lv.value } else { 0.0 };
    let audio_value = if terms.audio { la.value } else { 0.0 };
    Ok(LossOutput {
        value: visual_value + audio_value,
        visual_loss: lv.value,
        audio_loss: la.value,
        grad_visual,
        grad_audio,
        induction_grad_from_audio_loss: la.d_induction,
        audio_grad_from_visual_loss: vec![vec![0.0; dim]; n],
        pre_hinge: la.pre_hinge,
        sp,
        sn,
        threshold_margin: pooled.threshold_margin(&tensor),
    })
}
