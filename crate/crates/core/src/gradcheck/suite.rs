//! Seeded random instances for checking every hand-written gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{grad_check_away_from_kinks, CheckOutcome, GradCheckOptions};
use crate::error::{Error, Result};
use crate::induction::{induction_vector, Induction, InductionConfig};
use crate::losses::{audio_loss, total_loss, LossConfig, LossTerms, VisualPooling, DEFAULT_THETA};
use crate::tensor::{EmbeddingVector, FeatureMap};
use crate::train::{generate, Sample, SyntheticDatasetSpec, TrainConfig, Trainer, VisualVariant};
use crate::trimap::ThresholdConfig;

/// Instances closer than this to a kink are resampled, not failed.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Visual infoNCE loss w.r.t. the projected visual maps.
    VisualLoss,
    /// Weighted audio margin loss w.r.t. the audio embeddings.
    AudioLoss,
    /// Visual loss w.r.t. the visual projector parameters.
    VisualProjector,
    /// Audio loss w.r.t. the audio projector parameters.
    AudioProjector,
}

impl Target {
    pub const ALL: [Target; 4] = [
        Target::VisualLoss,
        Target::AudioLoss,
        Target::VisualProjector,
        Target::AudioProjector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::VisualLoss => "visual-loss",
            Target::AudioLoss => "audio-loss",
            Target::VisualProjector => "visual-projector",
            Target::AudioProjector => "audio-projector",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub target: Target,
    pub checked: usize,
    pub excluded: usize,
    pub failed: usize,
    pub worst_rel_error: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failed == 0
    }
}

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<EmbeddingVector> {
    (0..n)
        .map(|_| EmbeddingVector::new((0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect()))
        .collect::<Result<_>>()
        .expect("gaussian draws are finite")
}

fn random_maps(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Vec<FeatureMap> {
    (0..n)
        .map(|_| FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0)))
        .collect::<Result<_>>()
        .expect("uniform draws are finite")
}

fn flatten<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    rows.into_iter().flat_map(|r| r.iter().copied()).collect()
}

fn pooled_inductions(maps: &[FeatureMap]) -> Result<Vec<Induction>> {
    maps.iter()
        .map(|f| induction_vector(f, &InductionConfig::default()))
        .collect()
}

fn visual_loss_instance(seed: u64, opts: &GradCheckOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let (c, h, w) = (4, 3, 3);
    let maps = random_maps(&mut rng, n, c, h, w);
    let inductions = pooled_inductions(&maps)?;
    let audio = random_vectors(&mut rng, n, c);
    let pooling = VisualPooling::TriMap(ThresholdConfig::pooled());
    let cfg = LossConfig::default();
    let out = total_loss(&maps, &inductions, &audio, &pooling, &cfg, LossTerms::VISUAL_ONLY)?;
    let x = flatten(maps.iter().map(FeatureMap::data));
    let analytic = flatten(out.grad_visual.iter().map(Vec::as_slice));
    let f = |x: &[f64]| {
        x.chunks(c * h * w)
            .map(|d| FeatureMap::new(c, h, w, d.to_vec()))
            .collect::<Result<Vec<_>>>()
            .and_then(|ms| total_loss(&ms, &inductions, &audio, &pooling, &cfg, LossTerms::VISUAL_ONLY))
            .map_or(f64::NAN, |o| o.value)
    };
    grad_check_away_from_kinks(f, &x, &analytic, opts, out.threshold_margin, KINK_MARGIN)
}

fn audio_loss_instance(seed: u64, opts: &GradCheckOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=5);
    let dim = 4;
    let inductions = random_vectors(&mut rng, n, dim);
    let audio = random_vectors(&mut rng, n, dim);
    let out = audio_loss(&inductions, &audio, DEFAULT_THETA, true, true)?;
    let kink = out.pre_hinge.iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
    let x = flatten(audio.iter().map(EmbeddingVector::as_slice));
    let analytic = flatten(out.d_audio.iter().map(Vec::as_slice));
    let f = |x: &[f64]| {
        x.chunks(dim)
            .map(|c| EmbeddingVector::new(c.to_vec()))
            .collect::<Result<Vec<_>>>()
            .and_then(|a| audio_loss(&inductions, &a, DEFAULT_THETA, true, true))
            .map_or(f64::NAN, |o| o.value)
    };
    grad_check_away_from_kinks(f, &x, &analytic, opts, kink, KINK_MARGIN)
}

/// A tiny trainer and batch; odd seeds use the two-layer visual projector.
fn projector_setup(seed: u64) -> Result<(Trainer, Vec<Sample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let spec = SyntheticDatasetSpec {
        classes: 2,
        visual_dim: 4,
        audio_dim: 4,
        height: 3,
        width: 3,
        rect_min: 1,
        rect_max: 2,
        noise: 0.5,
        n_train: n,
        n_eval: 0,
        seed,
        ..Default::default()
    };
    let (data, _) = generate(&spec)?;
    let visual_variant = if seed.is_multiple_of(2) {
        VisualVariant::SingleLinear
    } else {
        VisualVariant::LinearReluLinear
    };
    let cfg = TrainConfig {
        common_dim: 3,
        hidden_dim: 8,
        visual_variant,
        seed,
        ..Default::default()
    };
    Ok((Trainer::new(cfg, spec.visual_dim, spec.audio_dim)?, data.train))
}

fn visual_projector_instance(seed: u64, opts: &GradCheckOptions) -> Result<CheckOutcome> {
    let (trainer, samples) = projector_setup(seed)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let grads = trainer.parameter_gradients(&batch, LossTerms::VISUAL_ONLY)?;
    let model = &trainer.model;
    let cfg = &trainer.cfg;

    // Induction vectors enter the visual loss as constants.
    let projected = samples
        .iter()
        .map(|s| model.visual.project(&s.visual).map(|(f, _)| f))
        .collect::<Result<Vec<_>>>()?;
    let inductions = projected
        .iter()
        .map(|f| induction_vector(f, &cfg.induction))
        .collect::<Result<Vec<_>>>()?;
    let audio_in: Vec<EmbeddingVector> = samples.iter().map(|s| s.audio.clone()).collect();
    let (audio, _) = model.audio.project_batch(&audio_in)?;
    let pooling = VisualPooling::TriMap(cfg.thresholds);

    let f = |p: &[f64]| {
        let mut visual = model.visual.clone();
        visual.mlp.params_mut().copy_from_slice(p);
        samples
            .iter()
            .map(|s| visual.project(&s.visual).map(|(f, _)| f))
            .collect::<Result<Vec<_>>>()
            .and_then(|maps| total_loss(&maps, &inductions, &audio, &pooling, &cfg.loss, LossTerms::VISUAL_ONLY))
            .map_or(f64::NAN, |o| o.value)
    };
    grad_check_away_from_kinks(
        f,
        model.visual.mlp.params(),
        &grads.visual,
        opts,
        grads.kink_distance,
        KINK_MARGIN,
    )
}

fn audio_projector_instance(seed: u64, opts: &GradCheckOptions) -> Result<CheckOutcome> {
    let (trainer, samples) = projector_setup(seed)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let grads = trainer.parameter_gradients(&batch, LossTerms::AUDIO_ONLY)?;
    let f = |p: &[f64]| {
        let mut probe = trainer.clone();
        probe.model.audio.mlp.params_mut().copy_from_slice(p);
        probe.batch_loss(&batch).map_or(f64::NAN, |l| l.audio)
    };
    grad_check_away_from_kinks(
        f,
        trainer.model.audio.mlp.params(),
        &grads.audio,
        opts,
        grads.kink_distance,
        KINK_MARGIN,
    )
}

/// Checks one seeded instance of `target`.
pub fn check_instance(target: Target, seed: u64, opts: &GradCheckOptions) -> Result<CheckOutcome> {
    match target {
        Target::VisualLoss => visual_loss_instance(seed, opts),
        Target::AudioLoss => audio_loss_instance(seed, opts),
        Target::VisualProjector => visual_projector_instance(seed, opts),
        Target::AudioProjector => audio_projector_instance(seed, opts),
    }
}

/// Checks `instances` instances starting at `seed`, drawing further seeds to
/// replace instances that land near a kink.
pub fn run_suite(target: Target, instances: usize, seed: u64, opts: &GradCheckOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        target,
        checked: 0,
        excluded: 0,
        failed: 0,
        worst_rel_error: 0.0,
    };
    let budget = instances.saturating_mul(10).max(10);
    let mut next = seed;
    while report.checked < instances {
        if report.checked + report.excluded >= budget {
            return Err(Error::InvalidConfig(format!(
                "{}: {} of {} draws fell near a kink",
                target.name(),
                report.excluded,
                budget
            )));
        }
        match check_instance(target, next, opts)? {
            CheckOutcome::Checked(r) => {
                report.checked += 1;
                report.worst_rel_error = report.worst_rel_error.max(r.max_rel_error);
                if !r.passed {
                    log::warn!("{} seed {next}: relative error {:.3e}", target.name(), r.max_rel_error);
                    report.failed += 1;
                }
            }
            CheckOutcome::ExcludedAtKink { distance } => {
                log::debug!(
                    "{} seed {next}: excluded at kink distance {distance:.3e}",
                    target.name()
                );
                report.excluded += 1;
            }
        }
        next = next.wrapping_add(1);
    }
    Ok(report)
}
