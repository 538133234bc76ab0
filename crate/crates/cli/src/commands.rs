//! The subcommands, writing human-readable output to `out`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use avin_core::gradcheck::suite::{run_suite, Target};
use avin_core::gradcheck::{GradCheckOptions, Probe};
use avin_core::graphcut::{generalized_residual, ncut_objective, token_cut};
use avin_core::localize::{argmax_inside, consensus_map, evaluate, upsample_bilinear, EvalRecord, Heatmap};
use avin_core::tensor::{EmbeddingVector, FeatureMap, SimilarityMap};
use avin_core::train::{generate, EpochRecord, Model, Trainer};
use serde::Serialize;

use crate::avf::AvfFile;
use crate::config::RunConfig;
use crate::error::{CliError, Context, Result};
use crate::store;

pub const CHECKPOINT: &str = "checkpoint.avf";
pub const BEST_CHECKPOINT: &str = "best.avf";
pub const REPORT: &str = "report.jsonl";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError {
    CliError::io(path.to_path_buf())
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::io("<stdout>")(e)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Text-art rendering of a `[0, 1]` map, one character per cell.
pub fn preview(map: &SimilarityMap) -> String {
    const RAMP: &[u8] = b" .:-=+*#%@";
    let mut s = String::with_capacity(map.height() * (map.width() + 1));
    for i in 0..map.height() {
        for j in 0..map.width() {
            let v = map.get(i, j).clamp(0.0, 1.0);
            s.push(RAMP[((v * (RAMP.len() - 1) as f64).round()) as usize] as char);
        }
        s.push('\n');
    }
    s
}

pub fn synth(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = cfg.dataset_spec();
    let (data, _) = generate(&spec).context(|| "synthetic dataset".into())?;
    let files = store::write_dataset(out_dir, &spec, &data)?;
    for f in files {
        writeln!(out, "wrote {}", f.display()).map_err(out_err)?;
    }
    writeln!(
        out,
        "{} train / {} eval samples, {} classes, seed {}",
        data.train.len(),
        data.eval.len(),
        spec.classes,
        spec.seed
    )
    .map_err(out_err)
}

#[derive(Serialize)]
struct ReportHeader<'a> {
    kind: &'static str,
    dataset: &'a Path,
    config: &'a RunConfig,
    /// Encoders are not trained here; the backbone rate is recorded only.
    lr_backbone_unused: f64,
}

#[derive(Serialize)]
struct ReportLine {
    kind: &'static str,
    epoch: usize,
    l_v: f64,
    l_a: f64,
    total: f64,
    eval_ciou: Option<f64>,
    eval_auc: Option<f64>,
    argmax_hit_rate: Option<f64>,
}

impl ReportLine {
    fn new(r: &EpochRecord) -> Self {
        Self {
            kind: "epoch",
            epoch: r.epoch,
            l_v: r.visual_loss,
            l_a: r.audio_loss,
            total: r.total_loss,
            eval_ciou: r.eval.as_ref().map(|e| e.mean_ciou),
            eval_auc: r.eval.as_ref().map(|e| e.auc),
            argmax_hit_rate: r.eval.as_ref().map(|e| e.argmax_hit_rate),
        }
    }
}

fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    store::checkpoint_file(model)
        .and_then(|f| f.write(path))
        .map_err(CliError::format(path))
}

/// Trains on `data_dir`, writing the last and best checkpoints after every
/// epoch and one JSON report line per epoch.
pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let (_, data) = store::read_dataset(data_dir)?;
    let first = data
        .train
        .first()
        .ok_or_else(|| CliError::Usage("dataset has no training samples".into()))?;
    let mut trainer = Trainer::new(cfg.train_config(), first.visual.channels(), first.audio.dim())
        .context(|| "trainer setup".into())?;

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let report_path = out_dir.join(REPORT);
    let mut report = BufWriter::new(File::create(&report_path).map_err(io_err(&report_path))?);
    let header = ReportHeader {
        kind: "header",
        dataset: data_dir,
        config: cfg,
        lr_backbone_unused: cfg.lr_backbone,
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(report, "{line}").map_err(io_err(&report_path))?;

    let last = out_dir.join(CHECKPOINT);
    let best = out_dir.join(BEST_CHECKPOINT);
    let mut best_ciou = f64::NEG_INFINITY;
    let mut failure: Option<CliError> = None;
    let result = trainer.fit(&data, |rec, model| {
        let line = serde_json::to_string(&ReportLine::new(rec)).expect("record serializes");
        let written = writeln!(report, "{line}")
            .and_then(|_| report.flush())
            .map_err(io_err(&report_path))
            .and_then(|_| writeln!(out, "{line}").map_err(out_err))
            .and_then(|_| write_checkpoint(model, &last))
            .and_then(|_| match &rec.eval {
                Some(e) if e.mean_ciou > best_ciou => {
                    best_ciou = e.mean_ciou;
                    write_checkpoint(model, &best)
                }
                _ => Ok(()),
            });
        written.map_err(|e| {
            failure = Some(e);
            avin_core::Error::InvalidConfig("report writer failed".into())
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let summary = result.context(|| "training".into())?;
    match (summary.best_epoch, summary.best_eval_ciou) {
        (Some(epoch), Some(ciou)) => writeln!(out, "best epoch {epoch}: eval cIoU {ciou:.4}"),
        _ => writeln!(out, "no eval split; best checkpoint not written"),
    }
    .map_err(out_err)
}

pub fn read_model(checkpoint: &Path) -> Result<Model> {
    require_file(checkpoint, "checkpoint")?;
    AvfFile::read(checkpoint)
        .and_then(|f| store::model_from_checkpoint(&f))
        .map_err(CliError::format(checkpoint))
}

/// Heatmaps for every sample of a feature file.
pub fn localize(
    checkpoint: &Path,
    features: &Path,
    output: &Path,
    previews: usize,
    out: &mut dyn Write,
) -> Result<Vec<Heatmap>> {
    let model = read_model(checkpoint)?;
    require_file(features, "feature file")?;
    let samples = store::read_split(features)?;
    if let Some(s) = samples.first() {
        let (cv, ca) = (model.visual.mlp.in_dim(), model.audio.mlp.in_dim());
        if s.visual.channels() != cv || s.audio.dim() != ca {
            return Err(CliError::DimMismatch(format!(
                "checkpoint expects {cv} visual / {ca} audio channels, features have {} / {}",
                s.visual.channels(),
                s.audio.dim()
            )));
        }
    }
    let heatmaps = model.heatmaps(&samples).context(|| "localization".into())?;
    store::heatmap_file(&heatmaps)
        .and_then(|f| f.write(output))
        .map_err(CliError::format(output))?;
    let mut hits = 0;
    for (k, (s, h)) in samples.iter().zip(&heatmaps).enumerate() {
        let peak = h.argmax();
        let inside = s.region().map(|b| argmax_inside(h, b));
        hits += usize::from(inside == Some(true));
        if k < previews {
            let (i, j) = (peak / h.width(), peak % h.width());
            let note = match inside {
                Some(true) => " (inside box)",
                Some(false) => " (outside box)",
                None => "",
            };
            writeln!(out, "sample {k}: peak at ({i}, {j}){note}\n{}", preview(h)).map_err(out_err)?;
        }
    }
    let with_boxes = samples.iter().filter(|s| s.region().is_some()).count();
    if with_boxes > 0 {
        writeln!(out, "peak inside first box: {hits}/{with_boxes}").map_err(out_err)?;
    }
    writeln!(out, "wrote {} heatmaps to {}", heatmaps.len(), output.display()).map_err(out_err)?;
    Ok(heatmaps)
}

/// Scores a heatmap file against the boxes of a split file.
pub fn eval(cfg: &RunConfig, heatmaps: &Path, boxes: &Path, out: &mut dyn Write) -> Result<EvalRecord> {
    cfg.validate()?;
    require_file(heatmaps, "heatmap file")?;
    require_file(boxes, "box file")?;
    let maps = AvfFile::read(heatmaps)
        .and_then(|f| store::heatmaps_from_file(&f))
        .map_err(CliError::format(heatmaps))?;
    let box_file = AvfFile::read(boxes).map_err(CliError::format(boxes))?;
    let mut by_sample = store::boxes_by_sample(&box_file).map_err(CliError::format(boxes))?;
    let declared = box_file.get("labels").map_or(0, |t| t.data().len());
    if let Some(id) = (0..declared)
        .chain(by_sample.keys().copied())
        .find(|id| !maps.contains_key(id))
    {
        return Err(CliError::MissingSample(id));
    }
    let factor = cfg.eval_upsample;
    let mut ids = Vec::with_capacity(maps.len());
    let mut pairs = Vec::with_capacity(maps.len());
    for (&id, map) in &maps {
        let scaled: Vec<_> = by_sample
            .remove(&id)
            .unwrap_or_default()
            .iter()
            .map(|b| b.scaled(factor))
            .collect();
        let s = upsample_bilinear(map, factor);
        let g = consensus_map(&scaled, cfg.agreement, s.height(), s.width())
            .context(|| format!("consensus map of sample {id}"))?;
        ids.push(id);
        pairs.push((s, g));
    }
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no heatmaps", heatmaps.display())));
    }
    let record = evaluate(&pairs, cfg.threshold).context(|| "evaluation".into())?;
    for (id, c) in ids.iter().zip(&record.per_sample) {
        match c {
            Some(c) => writeln!(out, "sample {id} ciou {c:.6}"),
            None => writeln!(out, "sample {id} ciou n/a (no ground truth, no prediction)"),
        }
        .map_err(out_err)?;
    }
    writeln!(
        out,
        "samples {} threshold {} agreement {} upsample {}\nciou {:.6}\nauc {:.6}",
        record.valid().len(),
        record.threshold,
        cfg.agreement,
        factor,
        record.mean_ciou,
        record.auc
    )
    .map_err(out_err)?;
    Ok(record)
}

pub struct GradCheckArgs {
    pub targets: Vec<Target>,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Random directional probes per instance; 0 checks every coordinate.
    pub probes: usize,
}

pub fn gradcheck(cfg: &RunConfig, args: &GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    let opts = GradCheckOptions {
        step: args.step,
        tolerance: args.tolerance,
        probe: match args.probes {
            0 => Probe::Coordinates,
            count => Probe::Random { count, seed: cfg.seed },
        },
    };
    let mut failed = Vec::new();
    for &target in &args.targets {
        let r = run_suite(target, args.instances, cfg.seed, &opts).context(|| target.name().into())?;
        writeln!(
            out,
            "{} {}: {} checked, {} excluded near kinks, {} failed, worst relative error {:.3e}",
            if r.passed() { "PASS" } else { "FAIL" },
            target.name(),
            r.checked,
            r.excluded,
            r.failed,
            r.worst_rel_error
        )
        .map_err(out_err)?;
        if !r.passed() {
            failed.push(target.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

/// Reads `tokens` as `[C, H, W]` or `[n, C]` (a `1 x n` grid).
fn read_tokens(path: &Path) -> Result<(Vec<EmbeddingVector>, usize, usize)> {
    let file = AvfFile::read(path).map_err(CliError::format(path))?;
    let t = file.require("tokens").map_err(CliError::format(path))?;
    let bad = |e: avin_core::Error| CliError::DimMismatch(format!("{}: {e}", path.display()));
    match *t.dims() {
        [c, h, w] => {
            let f = FeatureMap::new(c, h, w, t.data().to_vec()).map_err(bad)?;
            Ok(((0..f.positions()).map(|p| f.token(p)).collect(), h, w))
        }
        [n, c] => {
            let tokens = t
                .data()
                .chunks_exact(c.max(1))
                .map(|r| EmbeddingVector::new(r.to_vec()))
                .collect::<avin_core::Result<Vec<_>>>()
                .map_err(bad)?;
            Ok((tokens, 1, n))
        }
        _ => Err(CliError::DimMismatch(format!(
            "{}: tokens must be [C, H, W] or [n, C], got {:?}",
            path.display(),
            t.dims()
        ))),
    }
}

/// Normalized-cut bipartition of a token grid.
pub fn ncut(cfg: &RunConfig, tokens: &Path, output: Option<&PathBuf>, out: &mut dyn Write) -> Result<()> {
    cfg.induction().validate().context(|| "configuration".into())?;
    require_file(tokens, "token file")?;
    let (toks, h, w) = read_tokens(tokens)?;
    let cut = token_cut(&toks, h, w, cfg.tau_m, cfg.epsilon).context(|| "normalized cut".into())?;
    let y = &cut.eigenpair.vector;
    let residual = generalized_residual(&cut.graph.binarized, &cut.graph.degree, cut.eigenpair.value, y);
    let value = ncut_objective(&cut.graph.binarized, &cut.partition.assignment).context(|| "ncut value".into())?;
    writeln!(
        out,
        "tokens {} grid {h}x{w}\neigenvalue {:.12e}\nresidual {residual:.3e}\nncut {value:.12e}\nforeground {}\n{}",
        toks.len(),
        cut.eigenpair.value,
        cut.partition.foreground_count(),
        preview(&cut.partition.mask)
    )
    .map_err(out_err)?;
    if let Some(path) = output {
        AvfFile::new()
            .with("mask", vec![h, w], cut.partition.mask.data().to_vec())
            .and_then(|f| f.with("eigenvector", vec![y.len()], y.clone()))
            .and_then(|f| f.write(path))
            .map_err(CliError::format(path))?;
    }
    Ok(())
}
