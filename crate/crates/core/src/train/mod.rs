//! Projectors, optimizer, synthetic data, and the training loop.

pub mod adam;
pub mod projector;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::induction::{
    foreground_mask, induction_from_foreground, induction_vector, CutSource, Foreground, Induction, InductionConfig,
    InductionPath,
};
use crate::localize::{
    argmax_inside, consensus_map, evaluate, localization_map, EvalRecord, Heatmap, DEFAULT_AGREEMENT,
    DEFAULT_DECISION_THRESHOLD,
};
use crate::losses::{total_loss, LossConfig, LossOutput, LossTerms, VisualPooling};
use crate::tensor::{EmbeddingVector, FeatureMap};
use crate::trimap::{MaskMode, ThresholdConfig};

pub use adam::{Adam, AdamConfig, DEFAULT_BACKBONE_LR, DEFAULT_PROJECTOR_LR};
pub use projector::{AudioProjector, Mlp, MlpTrace, VisualProjector, VisualVariant};
pub use synth::{generate, Dataset, Prototypes, Sample, SyntheticDatasetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_projector: f64,
    /// Encoder learning rate; encoders are out of scope, so this is only reported.
    pub lr_backbone: f64,
    pub common_dim: usize,
    pub hidden_dim: usize,
    pub visual_variant: VisualVariant,
    pub induction: InductionConfig,
    pub thresholds: ThresholdConfig,
    pub mask_mode: MaskMode,
    pub loss: LossConfig,
    pub eval_threshold: f64,
    pub agreement: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_path(InductionPath::Pooled)
    }
}

impl TrainConfig {
    /// Defaults for an induction path: thresholds and visual projector depend on it.
    pub fn for_path(path: InductionPath) -> Self {
        let (thresholds, visual_variant) = match path {
            InductionPath::Pooled => (ThresholdConfig::pooled(), VisualVariant::SingleLinear),
            InductionPath::TokenCutMasked => (ThresholdConfig::masked(), VisualVariant::LinearReluLinear),
        };
        Self {
            epochs: 100,
            batch_size: 32,
            lr_projector: DEFAULT_PROJECTOR_LR,
            lr_backbone: DEFAULT_BACKBONE_LR,
            common_dim: 32,
            hidden_dim: 64,
            visual_variant,
            induction: InductionConfig {
                path,
                ..Default::default()
            },
            thresholds,
            mask_mode: MaskMode::TriMap,
            loss: LossConfig::default(),
            eval_threshold: DEFAULT_DECISION_THRESHOLD,
            agreement: DEFAULT_AGREEMENT,
            shuffle: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.common_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("projector dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(Error::InvalidConfig(format!(
                "eval threshold {} outside [0, 1]",
                self.eval_threshold
            )));
        }
        if self.agreement == 0 {
            return Err(Error::InvalidConfig("agreement must be at least 1".into()));
        }
        AdamConfig::with_lr(self.lr_projector).validate()?;
        self.induction.validate()?;
        self.thresholds.validate()?;
        self.loss.validate()
    }

    fn needs_fixed_foreground(&self) -> bool {
        match self.induction.path {
            InductionPath::Pooled => self.mask_mode == MaskMode::BiMap,
            InductionPath::TokenCutMasked => self.induction.cut_on == CutSource::Embedding,
        }
    }
}

/// Both projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub visual: VisualProjector,
    pub audio: AudioProjector,
}

/// Dataset-level localization quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_ciou: f64,
    pub auc: f64,
    /// Fraction of samples whose heatmap maximum lies in the first box.
    pub argmax_hit_rate: f64,
}

impl Model {
    pub fn new(cfg: &TrainConfig, visual_dim: usize, audio_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let visual = VisualProjector::new(cfg.visual_variant, visual_dim, cfg.hidden_dim, cfg.common_dim, rng)?;
        let audio = AudioProjector::new(audio_dim, cfg.hidden_dim, cfg.common_dim, rng)?;
        Ok(Self { visual, audio })
    }

    pub fn localize(&self, visual: &FeatureMap, audio: &EmbeddingVector) -> Result<Heatmap> {
        let (fv, _) = self.visual.project(visual)?;
        let fa = self.audio.project(audio)?;
        localization_map(&fv, &fa)
    }

    pub fn heatmaps(&self, samples: &[Sample]) -> Result<Vec<Heatmap>> {
        samples
            .iter()
            .enumerate()
            .map(|(k, s)| self.localize(&s.visual, &s.audio).map_err(|e| e.at_sample(k)))
            .collect()
    }

    pub fn evaluate(&self, samples: &[Sample], t: f64, agreement: usize) -> Result<(EvalRecord, EvalSummary)> {
        let heatmaps = self.heatmaps(samples)?;
        summarize(samples, heatmaps, t, agreement)
    }
}

/// Scores precomputed heatmaps against each sample's boxes.
pub fn summarize(
    samples: &[Sample],
    heatmaps: Vec<Heatmap>,
    t: f64,
    agreement: usize,
) -> Result<(EvalRecord, EvalSummary)> {
    let mut hits = 0usize;
    let mut pairs = Vec::with_capacity(samples.len());
    for (k, (s, h)) in samples.iter().zip(heatmaps).enumerate() {
        let g = consensus_map(&s.boxes, agreement, h.height(), h.width()).map_err(|e| e.at_sample(k))?;
        if s.region().is_some_and(|b| argmax_inside(&h, b)) {
            hits += 1;
        }
        pairs.push((h, g));
    }
    let record = evaluate(&pairs, t)?;
    let summary = EvalSummary {
        mean_ciou: record.mean_ciou,
        auc: record.auc,
        argmax_hit_rate: if samples.is_empty() {
            0.0
        } else {
            hits as f64 / samples.len() as f64
        },
    };
    Ok((record, summary))
}

/// One line of the training report. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub visual_loss: f64,
    pub audio_loss: f64,
    pub total_loss: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_eval_ciou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub visual: f64,
    pub audio: f64,
}

#[derive(Debug, Clone)]
pub struct ParameterGradients {
    pub value: f64,
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    /// Distance to the nearest rectifier, hinge or threshold kink.
    pub kink_distance: f64,
}

/// Everything a batch forward pass produces.
struct BatchPass {
    output: LossOutput,
    visual_traces: Vec<MlpTrace>,
    audio_trace: MlpTrace,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    visual_opt: Adam,
    audio_opt: Adam,
    rng: ChaCha8Rng,
    best: Option<(usize, f64, Model)>,
}

impl Trainer {
    /// Initializes both projectors from `cfg.seed`.
    pub fn new(cfg: TrainConfig, visual_dim: usize, audio_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(&cfg, visual_dim, audio_dim, &mut rng)?;
        Ok(Self::from_model(cfg, model, rng))
    }

    fn from_model(cfg: TrainConfig, model: Model, rng: ChaCha8Rng) -> Self {
        let adam = AdamConfig::with_lr(cfg.lr_projector);
        Self {
            visual_opt: Adam::new(adam, model.visual.mlp.params().len()),
            audio_opt: Adam::new(adam, model.audio.mlp.params().len()),
            cfg,
            model,
            rng,
            best: None,
        }
    }

    pub fn with_model(cfg: TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self::from_model(cfg, model, rng))
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.visual_opt, &self.audio_opt)
    }

    /// Best model by eval cIoU seen so far, with its epoch.
    pub fn best_model(&self) -> Option<(usize, &Model)> {
        self.best.as_ref().map(|(e, _, m)| (*e, m))
    }

    /// Foregrounds cut once from the raw embedding, when the config uses them.
    fn fixed_foregrounds(&self, samples: &[Sample]) -> Result<Option<Vec<Foreground>>> {
        if !self.cfg.needs_fixed_foreground() {
            return Ok(None);
        }
        samples
            .iter()
            .enumerate()
            .map(|(k, s)| foreground_mask(&s.visual, &self.cfg.induction).map_err(|e| e.at_sample(k)))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn forward(&self, batch: &[&Sample], fixed: Option<Vec<Foreground>>, terms: LossTerms) -> Result<BatchPass> {
        let fixed = match fixed {
            Some(f) => Some(f),
            None if self.cfg.needs_fixed_foreground() => Some(
                batch
                    .iter()
                    .map(|s| foreground_mask(&s.visual, &self.cfg.induction))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let mut projected = Vec::with_capacity(batch.len());
        let mut visual_traces = Vec::with_capacity(batch.len());
        for (k, s) in batch.iter().enumerate() {
            let (f, t) = self.model.visual.project(&s.visual).map_err(|e| e.at_sample(k))?;
            projected.push(f);
            visual_traces.push(t);
        }
        let audio_in: Vec<EmbeddingVector> = batch.iter().map(|s| s.audio.clone()).collect();
        let (audio, audio_trace) = self.model.audio.project_batch(&audio_in)?;

        let masked_on_embedding = self.cfg.induction.path == InductionPath::TokenCutMasked
            && self.cfg.induction.cut_on == CutSource::Embedding;
        let inductions = projected
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let ind = match (&fixed, masked_on_embedding) {
                    (Some(fg), true) => induction_from_foreground(f, &fg[k]),
                    _ => induction_vector(f, &self.cfg.induction),
                };
                ind.map_err(|e| e.at_sample(k))
            })
            .collect::<Result<Vec<Induction>>>()?;

        let pooling = match self.cfg.mask_mode {
            MaskMode::TriMap => VisualPooling::TriMap(self.cfg.thresholds),
            MaskMode::BiMap => {
                let masks = match (self.cfg.induction.path, &fixed) {
                    (InductionPath::TokenCutMasked, _) | (_, None) => {
                        inductions.iter().map(|ind| ind.mask.clone()).collect()
                    }
                    (InductionPath::Pooled, Some(fg)) => fg.iter().map(|f| f.mask().cloned()).collect(),
                };
                VisualPooling::BiMap(masks)
            }
        };
        let output = total_loss(&projected, &inductions, &audio, &pooling, &self.cfg.loss, terms)?;
        Ok(BatchPass {
            output,
            visual_traces,
            audio_trace,
        })
    }

    /// Loss of a batch under the current parameters, without updating them.
    pub fn batch_loss(&self, batch: &[&Sample]) -> Result<StepLosses> {
        let pass = self.forward(batch, None, LossTerms::BOTH)?;
        Ok(losses_of(&pass.output))
    }

    /// One optimizer step on `batch` using only the selected loss terms.
    pub fn step(&mut self, batch: &[&Sample], terms: LossTerms) -> Result<StepLosses> {
        self.step_with(batch, None, terms)
    }

    fn step_with(&mut self, batch: &[&Sample], fixed: Option<Vec<Foreground>>, terms: LossTerms) -> Result<StepLosses> {
        let pass = self.forward(batch, fixed, terms)?;
        let visual_grad = self.visual_gradient(&pass);
        let audio_grad = self.model.audio.backward(&pass.audio_trace, &pass.output.grad_audio);
        self.visual_opt.step(self.model.visual.mlp.params_mut(), &visual_grad)?;
        self.audio_opt.step(self.model.audio.mlp.params_mut(), &audio_grad)?;
        Ok(losses_of(&pass.output))
    }

    fn visual_gradient(&self, pass: &BatchPass) -> Vec<f64> {
        let mut total = vec![0.0; self.model.visual.mlp.params().len()];
        for (trace, g) in pass.visual_traces.iter().zip(&pass.output.grad_visual) {
            let (grad, _) = self.model.visual.backward(trace, g);
            for (t, x) in total.iter_mut().zip(grad) {
                *t += x;
            }
        }
        total
    }

    /// Loss value and parameter gradients of a batch, for gradient checks.
    pub fn parameter_gradients(&self, batch: &[&Sample], terms: LossTerms) -> Result<ParameterGradients> {
        let pass = self.forward(batch, None, terms)?;
        let visual = self.visual_gradient(&pass);
        let audio = self.model.audio.backward(&pass.audio_trace, &pass.output.grad_audio);
        let mut kink_distance = pass
            .visual_traces
            .iter()
            .map(MlpTrace::min_abs_preactivation)
            .fold(pass.audio_trace.min_abs_preactivation(), f64::min);
        if terms.visual {
            // Cosine similarity is only smooth on the scale of a vector's norm.
            let norms = pass
                .visual_traces
                .iter()
                .map(min_position_norm)
                .fold(f64::INFINITY, f64::min);
            kink_distance = kink_distance.min(pass.output.threshold_margin).min(norms);
        }
        if terms.audio {
            kink_distance = pass.output.pre_hinge.iter().fold(kink_distance, |m, p| m.min(p.abs()));
        }
        Ok(ParameterGradients {
            value: pass.output.value,
            visual,
            audio,
            kink_distance,
        })
    }

    fn batches(&self, order: &[usize]) -> Vec<Vec<usize>> {
        order
            .chunks(self.cfg.batch_size)
            .filter(|c| {
                if c.len() < 2 {
                    log::debug!("skipping trailing batch of one sample");
                }
                c.len() >= 2
            })
            .map(|c| c.to_vec())
            .collect()
    }

    fn run_epoch(
        &mut self,
        epoch: usize,
        data: &Dataset,
        fixed: &Option<Vec<Foreground>>,
        update: bool,
    ) -> Result<StepLosses> {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        if update && self.cfg.shuffle {
            order.shuffle(&mut self.rng);
        }
        let batches = self.batches(&order);
        if batches.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut sum = StepLosses {
            total: 0.0,
            visual: 0.0,
            audio: 0.0,
        };
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&k| &data.train[k]).collect();
            let fg = fixed.as_ref().map(|f| idx.iter().map(|&k| f[k].clone()).collect());
            let losses = if update {
                self.step_with(&batch, fg, LossTerms::BOTH)
            } else {
                self.forward(&batch, fg, LossTerms::BOTH).map(|p| losses_of(&p.output))
            }
            .map_err(|e| Error::Training {
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            sum.total += losses.total;
            sum.visual += losses.visual;
            sum.audio += losses.audio;
        }
        let n = batches.len() as f64;
        Ok(StepLosses {
            total: sum.total / n,
            visual: sum.visual / n,
            audio: sum.audio / n,
        })
    }

    fn record(&mut self, epoch: usize, losses: StepLosses, data: &Dataset) -> Result<EpochRecord> {
        let eval = if data.eval.is_empty() {
            None
        } else {
            let (_, summary) = self
                .model
                .evaluate(&data.eval, self.cfg.eval_threshold, self.cfg.agreement)?;
            if self.best.as_ref().is_none_or(|(_, best, _)| summary.mean_ciou > *best) {
                self.best = Some((epoch, summary.mean_ciou, self.model.clone()));
            }
            Some(summary)
        };
        Ok(EpochRecord {
            epoch,
            visual_loss: losses.visual,
            audio_loss: losses.audio,
            total_loss: losses.total,
            eval,
        })
    }

    /// Trains for `cfg.epochs` epochs. `on_epoch` sees every record (epoch 0 is
    /// the untrained model) and the model after that epoch.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
    ) -> Result<TrainReport> {
        if data.train.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let fixed = self.fixed_foregrounds(&data.train)?;
        let mut records = Vec::with_capacity(self.cfg.epochs + 1);
        let initial = self.run_epoch(0, data, &fixed, false)?;
        let rec = self.record(0, initial, data)?;
        on_epoch(&rec, &self.model)?;
        records.push(rec);
        for epoch in 1..=self.cfg.epochs {
            let losses = self.run_epoch(epoch, data, &fixed, true)?;
            let rec = self.record(epoch, losses, data)?;
            log::info!(
                "epoch {epoch}: total {:.5} (visual {:.5}, audio {:.5})",
                rec.total_loss,
                rec.visual_loss,
                rec.audio_loss
            );
            on_epoch(&rec, &self.model)?;
            records.push(rec);
        }
        Ok(TrainReport {
            records,
            best_epoch: self.best.as_ref().map(|(e, _, _)| *e),
            best_eval_ciou: self.best.as_ref().map(|(_, c, _)| *c),
        })
    }
}

fn min_position_norm(trace: &MlpTrace) -> f64 {
    let (out, cols) = (trace.output(), trace.columns());
    let channels = out.len() / cols;
    (0..cols)
        .map(|p| (0..channels).map(|c| out[c * cols + p].powi(2)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn losses_of(out: &LossOutput) -> StepLosses {
    StepLosses {
        total: out.visual_loss + out.audio_loss,
        visual: out.visual_loss,
        audio: out.audio_loss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_data(classes: usize, noise: f64, seed: u64) -> Dataset {
        let spec = SyntheticDatasetSpec {
            classes,
            visual_dim: 8,
            audio_dim: 8,
            height: 6,
            width: 6,
            rect_min: 2,
            rect_max: 4,
            noise,
            n_train: 16,
            n_eval: 4,
            seed,
            ..Default::default()
        };
        generate(&spec).unwrap().0
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr_projector: 1e-2,
            common_dim: 6,
            hidden_dim: 8,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_on_clean_data_lowers_the_loss() {
        let data = small_data(1, 0.0, 3);
        let mut trainer = Trainer::new(small_cfg(1), 8, 8).unwrap();
        let report = trainer.fit(&data, |_, _| Ok(())).unwrap();
        let before = trainer_loss_at_init(&data);
        assert_eq!(report.records[0].total_loss, before);
        let after = Trainer::with_model(small_cfg(1), trainer.model.clone())
            .unwrap()
            .run_epoch(0, &data, &None, false)
            .unwrap();
        assert!(after.total < before, "{} !< {}", after.total, before);
    }

    fn trainer_loss_at_init(data: &Dataset) -> f64 {
        let mut t = Trainer::new(small_cfg(1), 8, 8).unwrap();
        t.run_epoch(0, data, &None, false).unwrap().total
    }

    #[test]
    fn zeroed_audio_loss_leaves_audio_projector() {
        let data = small_data(2, 0.1, 4);
        let mut trainer = Trainer::new(small_cfg(2), 8, 8).unwrap();
        let before = trainer.model.audio.clone();
        let batch: Vec<&Sample> = data.train.iter().take(8).collect();
        trainer.step(&batch, LossTerms::VISUAL_ONLY).unwrap();
        assert_eq!(trainer.model.audio, before);
        assert_ne!(
            trainer.model.visual,
            Trainer::new(small_cfg(2), 8, 8).unwrap().model.visual
        );
    }

    #[test]
    fn steps_are_isolated_under_stop_grad() {
        let data = small_data(2, 0.1, 5);
        let batch: Vec<&Sample> = data.train.iter().take(8).collect();
        let base = Trainer::new(small_cfg(3), 8, 8).unwrap();
        let run = |terms| {
            let mut t = base.clone();
            t.step(&batch, terms).unwrap();
            t.model
        };
        let (both, vis, aud) = (
            run(LossTerms::BOTH),
            run(LossTerms::VISUAL_ONLY),
            run(LossTerms::AUDIO_ONLY),
        );
        assert_eq!(both.visual, vis.visual);
        assert_eq!(both.audio, aud.audio);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = small_data(2, 0.1, 6);
        let run = || {
            let mut t = Trainer::new(
                TrainConfig {
                    epochs: 2,
                    ..small_cfg(4)
                },
                8,
                8,
            )
            .unwrap();
            let report = t.fit(&data, |_, _| Ok(())).unwrap();
            (report, t.model)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_path_and_bimap_train() {
        let data = small_data(2, 0.05, 7);
        for (path, mode) in [
            (InductionPath::TokenCutMasked, MaskMode::TriMap),
            (InductionPath::TokenCutMasked, MaskMode::BiMap),
            (InductionPath::Pooled, MaskMode::BiMap),
        ] {
            let cfg = TrainConfig {
                mask_mode: mode,
                ..TrainConfig {
                    epochs: 1,
                    batch_size: 8,
                    common_dim: 6,
                    hidden_dim: 8,
                    ..TrainConfig::for_path(path)
                }
            };
            let mut t = Trainer::new(cfg, 8, 8).unwrap();
            let report = t.fit(&data, |_, _| Ok(())).unwrap();
            assert_eq!(report.records.len(), 2);
            assert!(report.records.iter().all(|r| r.total_loss.is_finite()));
        }
    }

    #[test]
    fn rejects_batches_of_one() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(Trainer::new(cfg, 4, 4), Err(Error::InvalidConfig(_))));
    }
}
