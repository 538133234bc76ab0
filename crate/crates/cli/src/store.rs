//! Datasets, checkpoints and heatmaps as AVF tensors.
//!
//! A split file holds `visual` `[N, C, H, W]`, `audio` `[N, Ca]`, `labels`
//! `[N]` and `boxes` `[M, 5]` with rows `(sample, top, left, bottom, right)`.
//! A checkpoint holds `visual.{k}.weight` `[out, in]` and `visual.{k}.bias`
//! `[out]` per layer, likewise for `audio`. A heatmap file holds one
//! `heatmap.{id}` `[H, W]` tensor per sample.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use avin_core::localize::{BoundingBox, Heatmap};
use avin_core::tensor::{EmbeddingVector, FeatureMap, SimilarityMap};
use avin_core::train::{AudioProjector, Dataset, Mlp, Model, Sample, SyntheticDatasetSpec, VisualProjector};
use serde::{Deserialize, Serialize};

use crate::avf::{write_atomic, AvfError, AvfFile, Tensor};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const TRAIN_FILE: &str = "train.avf";
pub const EVAL_FILE: &str = "eval.avf";
pub const MANIFEST_VERSION: u32 = 1;

fn invalid(name: &str, reason: impl Into<String>) -> AvfError {
    AvfError::Invalid {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn index_value(name: &str, x: f64) -> std::result::Result<usize, AvfError> {
    if x >= 0.0 && x.fract() == 0.0 && x < (1u64 << 24) as f64 {
        Ok(x as usize)
    } else {
        Err(invalid(name, format!("{x} is not a valid index")))
    }
}

pub fn split_file(samples: &[Sample]) -> std::result::Result<AvfFile, AvfError> {
    let n = samples.len();
    let (c, h, w) = samples.first().map_or((0, 0, 0), |s| {
        (s.visual.channels(), s.visual.height(), s.visual.width())
    });
    let ca = samples.first().map_or(0, |s| s.audio.dim());
    let mut visual = Vec::with_capacity(n * c * h * w);
    let mut audio = Vec::with_capacity(n * ca);
    let mut boxes = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        if (s.visual.channels(), s.visual.height(), s.visual.width(), s.audio.dim()) != (c, h, w, ca) {
            return Err(invalid("visual", format!("sample {k} has a different shape")));
        }
        visual.extend_from_slice(s.visual.data());
        audio.extend_from_slice(s.audio.as_slice());
        for b in &s.boxes {
            boxes.extend([k, b.top, b.left, b.bottom, b.right].map(|v| v as f64));
        }
    }
    let m = boxes.len() / 5;
    AvfFile::new()
        .with("visual", vec![n, c, h, w], visual)?
        .with("audio", vec![n, ca], audio)?
        .with("labels", vec![n], samples.iter().map(|s| s.class as f64).collect())?
        .with("boxes", vec![m, 5], boxes)
}

/// Boxes grouped by sample id.
pub fn boxes_by_sample(file: &AvfFile) -> std::result::Result<BTreeMap<usize, Vec<BoundingBox>>, AvfError> {
    let mut out: BTreeMap<usize, Vec<BoundingBox>> = BTreeMap::new();
    let Some(t) = file.get("boxes") else {
        return Ok(out);
    };
    let dims = t.expect_rank(2)?;
    if dims[1] != 5 {
        return Err(invalid("boxes", format!("expected 5 columns, got {}", dims[1])));
    }
    for row in t.data().chunks_exact(5) {
        let v = row
            .iter()
            .map(|&x| index_value("boxes", x))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if v[3] < v[1] || v[4] < v[2] {
            return Err(invalid("boxes", format!("box {:?} has negative extent", &v[1..])));
        }
        out.entry(v[0])
            .or_default()
            .push(BoundingBox::new(v[1], v[2], v[3], v[4]));
    }
    Ok(out)
}

/// Samples of a split or feature file; `labels` and `boxes` are optional.
pub fn samples_from_file(file: &AvfFile) -> std::result::Result<Vec<Sample>, AvfError> {
    let visual = file.require("visual")?;
    let audio = file.require("audio")?;
    let vd = visual.expect_rank(4)?;
    let ad = audio.expect_rank(2)?;
    let (n, c, h, w) = (vd[0], vd[1], vd[2], vd[3]);
    if ad[0] != n {
        return Err(invalid("audio", format!("{} rows for {n} visual maps", ad[0])));
    }
    let labels = match file.get("labels") {
        Some(t) => {
            if t.dims() != [n] {
                return Err(invalid("labels", format!("expected [{n}], got {:?}", t.dims())));
            }
            t.data()
                .iter()
                .map(|&x| index_value("labels", x))
                .collect::<std::result::Result<_, _>>()?
        }
        None => vec![0; n],
    };
    let mut boxes = boxes_by_sample(file)?;
    if let Some(&id) = boxes.keys().find(|&&id| id >= n) {
        return Err(invalid("boxes", format!("sample id {id} out of range for {n} samples")));
    }
    let per_map = c * h * w;
    (0..n)
        .map(|k| {
            let fm = FeatureMap::new(c, h, w, visual.data()[k * per_map..(k + 1) * per_map].to_vec())
                .map_err(|e| invalid("visual", e.to_string()))?;
            let ev = EmbeddingVector::new(audio.data()[k * ad[1]..(k + 1) * ad[1]].to_vec())
                .map_err(|e| invalid("audio", e.to_string()))?;
            let sample_boxes = boxes.remove(&k).unwrap_or_default();
            for b in &sample_boxes {
                b.check_bounds(h, w)
                    .map_err(|e| invalid("boxes", format!("sample {k}: {e}")))?;
            }
            Ok(Sample {
                visual: fm,
                audio: ev,
                boxes: sample_boxes,
                class: labels[k],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub train_file: String,
    pub eval_file: String,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub spec: SyntheticDatasetSpec,
}

impl Manifest {
    pub fn new(spec: &SyntheticDatasetSpec) -> Self {
        Self {
            version: MANIFEST_VERSION,
            seed: spec.seed,
            train_file: TRAIN_FILE.into(),
            eval_file: EVAL_FILE.into(),
            train_samples: spec.n_train,
            eval_samples: spec.n_eval,
            spec: spec.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| CliError::Manifest {
            path: path.clone(),
            reason: e.message().to_string(),
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CliError::Manifest {
                path,
                reason: format!("unsupported manifest version {}", manifest.version),
            });
        }
        Ok(manifest)
    }
}

pub fn write_dataset(dir: &Path, spec: &SyntheticDatasetSpec, data: &Dataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let train = dir.join(TRAIN_FILE);
    let eval = dir.join(EVAL_FILE);
    let manifest = dir.join(MANIFEST);
    split_file(&data.train)
        .and_then(|f| f.write(&train))
        .map_err(CliError::format(&train))?;
    split_file(&data.eval)
        .and_then(|f| f.write(&eval))
        .map_err(CliError::format(&eval))?;
    write_atomic(&manifest, Manifest::new(spec).to_toml().as_bytes()).map_err(CliError::io(&manifest))?;
    Ok(vec![train, eval, manifest])
}

pub fn read_split(path: &Path) -> Result<Vec<Sample>> {
    AvfFile::read(path)
        .and_then(|f| samples_from_file(&f))
        .map_err(CliError::format(path))
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = Manifest::read(dir)?;
    let train = read_split(&dir.join(&manifest.train_file))?;
    let eval = read_split(&dir.join(&manifest.eval_file))?;
    if train.len() != manifest.train_samples || eval.len() != manifest.eval_samples {
        return Err(CliError::Manifest {
            path: dir.join(MANIFEST),
            reason: format!(
                "manifest lists {}/{} samples, files hold {}/{}",
                manifest.train_samples,
                manifest.eval_samples,
                train.len(),
                eval.len()
            ),
        });
    }
    Ok((manifest, Dataset { train, eval }))
}

fn push_mlp(file: &mut AvfFile, prefix: &str, mlp: &Mlp) -> std::result::Result<(), AvfError> {
    for k in 0..mlp.layers() {
        let (i, o) = (mlp.dims()[k], mlp.dims()[k + 1]);
        let (w, b) = mlp.layer(k);
        file.push(Tensor::new(format!("{prefix}.{k}.weight"), vec![o, i], w.to_vec())?)?;
        file.push(Tensor::new(format!("{prefix}.{k}.bias"), vec![o], b.to_vec())?)?;
    }
    Ok(())
}

fn read_mlp(file: &AvfFile, prefix: &str) -> std::result::Result<Mlp, AvfError> {
    let mut dims = Vec::new();
    let mut params = Vec::new();
    for k in 0.. {
        let name = format!("{prefix}.{k}.weight");
        let Some(w) = file.get(&name) else { break };
        let wd = w.expect_rank(2)?;
        let (o, i) = (wd[0], wd[1]);
        match dims.last() {
            None => dims.push(i),
            Some(&prev) if prev == i => {}
            Some(&prev) => {
                return Err(invalid(
                    &name,
                    format!("layer input {i} does not match previous output {prev}"),
                ))
            }
        }
        let bias_name = format!("{prefix}.{k}.bias");
        let b = file.require(&bias_name)?;
        if b.dims() != [o] {
            return Err(invalid(&bias_name, format!("expected [{o}], got {:?}", b.dims())));
        }
        dims.push(o);
        params.extend_from_slice(w.data());
        params.extend_from_slice(b.data());
    }
    if dims.is_empty() {
        return Err(AvfError::MissingTensor(format!("{prefix}.0.weight")));
    }
    Mlp::from_params(&dims, params).map_err(|e| invalid(prefix, e.to_string()))
}

pub fn checkpoint_file(model: &Model) -> std::result::Result<AvfFile, AvfError> {
    let mut file = AvfFile::new();
    push_mlp(&mut file, "visual", &model.visual.mlp)?;
    push_mlp(&mut file, "audio", &model.audio.mlp)?;
    Ok(file)
}

pub fn model_from_checkpoint(file: &AvfFile) -> std::result::Result<Model, AvfError> {
    let visual = read_mlp(file, "visual")?;
    let audio = read_mlp(file, "audio")?;
    if visual.layers() > 2 {
        return Err(invalid(
            "visual",
            format!("{} layers; expected 1 or 2", visual.layers()),
        ));
    }
    if audio.layers() != 2 {
        return Err(invalid("audio", format!("{} layers; expected 2", audio.layers())));
    }
    if visual.out_dim() != audio.out_dim() {
        return Err(invalid(
            "audio",
            format!(
                "common dims differ: visual {} vs audio {}",
                visual.out_dim(),
                audio.out_dim()
            ),
        ));
    }
    Ok(Model {
        visual: VisualProjector { mlp: visual },
        audio: AudioProjector { mlp: audio },
    })
}

pub fn heatmap_name(id: usize) -> String {
    format!("heatmap.{id}")
}

pub fn heatmap_file(heatmaps: &[Heatmap]) -> std::result::Result<AvfFile, AvfError> {
    let mut file = AvfFile::new();
    for (k, h) in heatmaps.iter().enumerate() {
        file.push(Tensor::new(
            heatmap_name(k),
            vec![h.height(), h.width()],
            h.data().to_vec(),
        )?)?;
    }
    Ok(file)
}

/// Heatmaps keyed by sample id; tensors with other names are ignored.
pub fn heatmaps_from_file(file: &AvfFile) -> std::result::Result<BTreeMap<usize, Heatmap>, AvfError> {
    let mut out = BTreeMap::new();
    for t in file.tensors() {
        let Some(id) = t.name().strip_prefix("heatmap.") else {
            continue;
        };
        let id: usize = id
            .parse()
            .map_err(|_| invalid(t.name(), "sample id is not an integer"))?;
        let d = t.expect_rank(2)?;
        let map = SimilarityMap::new(d[0], d[1], t.data().to_vec()).map_err(|e| invalid(t.name(), e.to_string()))?;
        out.insert(id, map);
    }
    Ok(out)
}
