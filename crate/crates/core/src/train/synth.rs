//! Synthetic audio-visual features with a planted sounding region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::BoundingBox;
use crate::tensor::{EmbeddingVector, FeatureMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of rectangle side lengths, drawn per axis.
    pub rect_min: usize,
    pub rect_max: usize,
    /// Per-coordinate standard deviation of the additive noise.
    pub noise: f64,
    /// Multiplier on the shared background prototype.
    pub background_scale: f64,
    /// Copies of the planted rectangle recorded as annotator boxes.
    pub annotators: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            visual_dim: 64,
            audio_dim: 64,
            height: 14,
            width: 14,
            rect_min: 4,
            rect_max: 9,
            noise: 0.1,
            background_scale: 1.0,
            annotators: 2,
            n_train: 512,
            n_eval: 128,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.classes == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return bad("classes and feature dims must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.rect_min == 0 || self.rect_min > self.rect_max || self.rect_max > self.height.min(self.width) {
            return bad(format!(
                "rectangle sides {}..={} must fit a {}x{} grid",
                self.rect_min, self.rect_max, self.height, self.width
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if !self.background_scale.is_finite() {
            return bad("background_scale must be finite".into());
        }
        if self.n_train == 0 {
            return bad("n_train must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub visual: FeatureMap,
    pub audio: EmbeddingVector,
    pub boxes: Vec<BoundingBox>,
    pub class: usize,
}

impl Sample {
    /// The rectangle the sample was generated with (first annotator box).
    pub fn region(&self) -> Option<&BoundingBox> {
        self.boxes.first()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Random prototypes shared by every sample of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub visual: Vec<EmbeddingVector>,
    pub background: EmbeddingVector,
    pub audio: Vec<EmbeddingVector>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return EmbeddingVector::new(v.into_iter().map(|x| x / norm).collect()).expect("finite");
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, base: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        base
    } else {
        let n: f64 = StandardNormal.sample(rng);
        base + sigma * n
    }
}

fn draw_sample(rng: &mut ChaCha8Rng, spec: &SyntheticDatasetSpec, protos: &Prototypes) -> Sample {
    let class = rng.gen_range(0..spec.classes);
    let rh = rng.gen_range(spec.rect_min..=spec.rect_max);
    let rw = rng.gen_range(spec.rect_min..=spec.rect_max);
    let top = rng.gen_range(0..=spec.height - rh);
    let left = rng.gen_range(0..=spec.width - rw);
    let rect = BoundingBox::new(top, left, top + rh - 1, left + rw - 1);

    let fg = &protos.visual[class];
    let bg = &protos.background;
    let mut data = Vec::with_capacity(spec.visual_dim * spec.height * spec.width);
    for c in 0..spec.visual_dim {
        for i in 0..spec.height {
            for j in 0..spec.width {
                let base = if rect.contains(i, j) {
                    fg[c]
                } else {
                    spec.background_scale * bg[c]
                };
                data.push(noisy(rng, base, spec.noise));
            }
        }
    }
    let visual = FeatureMap::new(spec.visual_dim, spec.height, spec.width, data).expect("finite");
    let audio_proto = &protos.audio[class];
    let audio = EmbeddingVector::new(
        (0..spec.audio_dim)
            .map(|c| noisy(rng, audio_proto[c], spec.noise))
            .collect(),
    )
    .expect("finite");
    Sample {
        visual,
        audio,
        boxes: vec![rect; spec.annotators],
        class,
    }
}

/// Draws prototypes then the train split and the eval split from one seeded stream.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<(Dataset, Prototypes)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = Prototypes {
        visual: (0..spec.classes)
            .map(|_| unit_vector(&mut rng, spec.visual_dim))
            .collect(),
        background: unit_vector(&mut rng, spec.visual_dim),
        audio: (0..spec.classes)
            .map(|_| unit_vector(&mut rng, spec.audio_dim))
            .collect(),
    };
    let train = (0..spec.n_train)
        .map(|_| draw_sample(&mut rng, spec, &protos))
        .collect();
    let eval = (0..spec.n_eval).map(|_| draw_sample(&mut rng, spec, &protos)).collect();
    Ok((Dataset { train, eval }, protos))
}
