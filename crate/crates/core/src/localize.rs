//! Localization heatmaps and the cIoU / AUC metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity_map, minmax_normalize, EmbeddingVector, FeatureMap, SimilarityMap};

pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_AGREEMENT: usize = 2;
/// Number of evenly spaced thresholds in `[0, 1]` used by [`auc`].
pub const AUC_GRID_POINTS: usize = 21;

/// Min-max normalized audio-visual similarity over a grid.
pub type Heatmap = SimilarityMap;

/// Cosine map between every position of `visual` and `audio`, normalized to `[0, 1]`.
pub fn localization_map(visual: &FeatureMap, audio: &EmbeddingVector) -> Result<Heatmap> {
    Ok(minmax_normalize(&cosine_similarity_map(visual, audio)?))
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..=self.bottom).contains(&i) && (self.left..=self.right).contains(&j)
    }

    pub fn height(&self) -> usize {
        self.bottom + 1 - self.top
    }

    pub fn width(&self) -> usize {
        self.right + 1 - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.top > self.bottom || self.left > self.right || self.bottom >= height || self.right >= width {
            return Err(Error::OutOfBounds {
                top: self.top,
                left: self.left,
                bottom: self.bottom,
                right: self.right,
                height,
                width,
            });
        }
        Ok(())
    }

    /// The pixels this box covers after an integer upsampling by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        Self {
            top: self.top * factor,
            left: self.left * factor,
            bottom: (self.bottom + 1) * factor - 1,
            right: (self.right + 1) * factor - 1,
        }
    }
}

/// Annotator agreement map `g = min(Σ b_j / C, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMap {
    pub map: SimilarityMap,
    pub agreement: usize,
}

impl ConsensusMap {
    pub fn mass(&self) -> f64 {
        self.map.data().iter().sum()
    }
}

pub fn consensus_map(boxes: &[BoundingBox], agreement: usize, height: usize, width: usize) -> Result<ConsensusMap> {
    if agreement == 0 {
        return Err(Error::InvalidConfig("agreement must be at least 1".into()));
    }
    let mut counts = vec![0usize; height * width];
    for b in boxes {
        b.check_bounds(height, width)?;
        for i in b.top..=b.bottom {
            for j in b.left..=b.right {
                counts[i * width + j] += 1;
            }
        }
    }
    let c = agreement as f64;
    let data = counts.into_iter().map(|k| (k as f64 / c).min(1.0)).collect();
    Ok(ConsensusMap {
        map: SimilarityMap::from_raw(height, width, data),
        agreement,
    })
}

/// Consensus IoU with prediction set `{s > t}` and ground truth `{g > 0}`.
pub fn ciou(s: &Heatmap, g: &ConsensusMap, t: f64) -> Result<f64> {
    if s.height() != g.map.height() || s.width() != g.map.width() {
        return Err(Error::ShapeMismatch(format!(
            "heatmap {}x{} vs consensus {}x{}",
            s.height(),
            s.width(),
            g.map.height(),
            g.map.width()
        )));
    }
    let mut hit = 0.0;
    let mut mass = 0.0;
    let mut predicted = 0usize;
    let mut false_positive = 0usize;
    for (&si, &gi) in s.data().iter().zip(g.map.data()) {
        mass += gi;
        if si > t {
            predicted += 1;
            hit += gi;
            if gi <= 0.0 {
                false_positive += 1;
            }
        }
    }
    if mass == 0.0 && predicted == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(hit / (mass + false_positive as f64))
}

/// The thresholds `0, 0.05, ..., 1` at which the success curve is sampled.
pub fn auc_grid() -> Vec<f64> {
    (0..AUC_GRID_POINTS)
        .map(|k| k as f64 / (AUC_GRID_POINTS - 1) as f64)
        .collect()
}

/// Trapezoidal area under the fraction-of-samples-with-cIoU-above-threshold curve.
pub fn auc(cious: &[f64]) -> f64 {
    if cious.is_empty() {
        return 0.0;
    }
    // Integer counts keep the fixtures exact: one rounding, in the division.
    let counts: Vec<usize> = auc_grid()
        .iter()
        .map(|&t| cious.iter().filter(|&&c| c > t).count())
        .collect();
    let twice_area: usize = counts.windows(2).map(|w| w[0] + w[1]).sum();
    twice_area as f64 / (2 * (AUC_GRID_POINTS - 1) * cious.len()) as f64
}

/// Whether the (first) maximum of `s` lies inside `b`.
pub fn argmax_inside(s: &Heatmap, b: &BoundingBox) -> bool {
    let k = s.argmax();
    b.contains(k / s.width(), k % s.width())
}

/// Bilinear upsampling by an integer factor with half-pixel centers.
pub fn upsample_bilinear(s: &SimilarityMap, factor: usize) -> SimilarityMap {
    if factor <= 1 {
        return s.clone();
    }
    let (h, w) = (s.height(), s.width());
    let (oh, ow) = (h * factor, w * factor);
    let coord = |o: usize, n: usize| {
        let x = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let mut data = Vec::with_capacity(oh * ow);
    for oi in 0..oh {
        let (i0, i1, fy) = coord(oi, h);
        for oj in 0..ow {
            let (j0, j1, fx) = coord(oj, w);
            let top = s.get(i0, j0) * (1.0 - fx) + s.get(i0, j1) * fx;
            let bottom = s.get(i1, j0) * (1.0 - fx) + s.get(i1, j1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    SimilarityMap::from_raw(oh, ow, data)
}

/// Per-sample and dataset-level localization metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub threshold: f64,
    /// `None` where the sample had neither ground truth nor prediction.
    pub per_sample: Vec<Option<f64>>,
    pub mean_ciou: f64,
    pub auc: f64,
    pub grid: Vec<f64>,
}

impl EvalRecord {
    pub fn valid(&self) -> Vec<f64> {
        self.per_sample.iter().flatten().copied().collect()
    }
}

pub fn evaluate(pairs: &[(Heatmap, ConsensusMap)], t: f64) -> Result<EvalRecord> {
    let mut per_sample = Vec::with_capacity(pairs.len());
    for (k, (s, g)) in pairs.iter().enumerate() {
        match ciou(s, g, t) {
            Ok(v) => per_sample.push(Some(v)),
            Err(Error::EmptyGroundTruth) => {
                log::warn!("sample {k} has no ground truth and no prediction; excluded");
                per_sample.push(None);
            }
            Err(e) => return Err(e.at_sample(k)),
        }
    }
    let valid: Vec<f64> = per_sample.iter().flatten().copied().collect();
    let mean_ciou = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(EvalRecord {
        threshold: t,
        auc: auc(&valid),
        per_sample,
        mean_ciou,
        grid: auc_grid(),
    })
}
