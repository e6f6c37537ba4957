//! Multi-pass semantic-context classification.
//!
//! Pass 1 classifies band voxels from intensity, distance and landmark
//! features. Every later pass additionally reads the cartilage probability
//! maps produced by the pass before it.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::distance::{extract_band, Band, LandmarkSet};
use crate::features::{precompute_context, FeatureConfig, FeatureContext, FeatureKind, ProbabilityMaps};
use crate::forest::{predict_volume, train_forest, ForestConfig, RandomForest, TrainingSample};
use crate::labels::{Palette, NUM_CLASSES};
use crate::rng::{derive_seed, substream};
use crate::volume::{LabelVolume, Volume};
use crate::{Error, Result};

pub const CASCADE_MAGIC: &[u8; 7] = b"SCFCASC";
pub const CASCADE_VERSION: u32 = 1;

const MAX_HEADER: usize = 1 << 20;
const MAX_FOREST: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub num_passes: usize,
    /// Per volume and class, at most this many band voxels are sampled.
    pub samples_per_class_per_volume: usize,
    /// Build pass-k training maps by 2-fold cross-prediction instead of
    /// applying the shipped pass-(k−1) forest to its own training data.
    pub cross_context: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            num_passes: 2,
            samples_per_class_per_volume: 4000,
            cross_context: false,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_passes == 0 {
            return Err(Error::InvalidArgument("num_passes must be at least 1".into()));
        }
        if self.samples_per_class_per_volume == 0 {
            return Err(Error::InvalidArgument(
                "samples_per_class_per_volume must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One annotated training volume.
#[derive(Debug, Clone)]
pub struct TrainingVolume {
    pub id: String,
    /// Volumes with the same subject are kept together by cross-prediction.
    pub subject: String,
    pub intensity: Volume,
    pub bone_mask: LabelVolume,
    pub landmarks: Vec<LandmarkSet>,
    pub gt: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    passes: Vec<RandomForest>,
    config: CascadeConfig,
    palette: Palette,
    training_spacing: Option<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: CascadeConfig,
    palette: Palette,
    training_spacing: Option<[f64; 3]>,
    num_passes: usize,
}

impl CascadeModel {
    pub fn new(
        passes: Vec<RandomForest>,
        config: CascadeConfig,
        palette: Palette,
        training_spacing: Option<[f64; 3]>,
    ) -> Result<Self> {
        if passes.is_empty() {
            return Err(Error::BadModel("cascade has no passes".into()));
        }
        for (k, forest) in passes.iter().enumerate() {
            if forest.pass() != k + 1 {
                return Err(Error::BadModel(format!(
                    "forest in slot {} was trained for pass {}",
                    k + 1,
                    forest.pass()
                )));
            }
            if forest.num_classes() != NUM_CLASSES {
                return Err(Error::BadModel(format!(
                    "pass {} has {} classes, expected {NUM_CLASSES}",
                    k + 1,
                    forest.num_classes()
                )));
            }
        }
        Ok(CascadeModel {
            passes,
            config,
            palette,
            training_spacing,
        })
    }

    pub fn passes(&self) -> &[RandomForest] {
        &self.passes
    }

    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    /// Voxel spacing of the first training volume.
    pub fn training_spacing(&self) -> Option<[f64; 3]> {
        self.training_spacing
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        self.passes[0].feature_config()
    }

    /// The first `n` passes. Because pass k is trained only from passes
    /// before it, this equals a cascade trained with `num_passes = n`.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.passes.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n} of {} passes",
                self.passes.len()
            )));
        }
        let config = CascadeConfig {
            num_passes: n,
            ..self.config.clone()
        };
        CascadeModel::new(
            self.passes[..n].to_vec(),
            config,
            self.palette.clone(),
            self.training_spacing,
        )
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            palette: self.palette.clone(),
            training_spacing: self.training_spacing,
            num_passes: self.passes.len(),
        })
        .map_err(|e| Error::BadModel(e.to_string()))?;
        let mut w = Writer::new(out);
        let io = |e| Error::io("<cascade stream>", e);
        w.bytes(CASCADE_MAGIC).map_err(io)?;
        w.u32(CASCADE_VERSION).map_err(io)?;
        w.blob(&header).map_err(io)?;
        for forest in &self.passes {
            w.blob(&forest.to_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        let magic: [u8; 7] = r.array()?;
        if &magic != CASCADE_MAGIC {
            return Err(Error::BadModel("not a cascade model (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CASCADE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CASCADE_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(&r.blob(MAX_HEADER)?)
            .map_err(|e| Error::BadModel(format!("bad cascade header: {e}")))?;
        let passes = (0..header.num_passes)
            .map(|_| RandomForest::from_bytes(&r.blob(MAX_FOREST)?))
            .collect::<Result<Vec<_>>>()?;
        CascadeModel::new(passes, header.config, header.palette, header.training_spacing)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        CascadeModel::read(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CascadeModel::from_bytes(&bytes)
    }
}

/// Context and band of a volume, computed once and shared by all passes.
#[derive(Debug, Clone)]
pub struct PreparedVolume {
    pub context: FeatureContext,
    pub band: Band,
}

pub fn prepare_volume(
    intensity: &Volume,
    bone_mask: &LabelVolume,
    landmarks: &[LandmarkSet],
    features: &FeatureConfig,
) -> Result<PreparedVolume> {
    let context = precompute_context(intensity, bone_mask, landmarks, None)?;
    let band = extract_band(context.distances(), features.band_tau_in_mm, features.band_tau_out_mm)?;
    Ok(PreparedVolume { context, band })
}

/// Band voxels of every class, each class capped per volume by uniform
/// subsampling without replacement.
fn draw_samples(volume: u32, gt: &LabelVolume, band: &Band, cap: usize, seed: u64) -> Vec<TrainingSample> {
    let g = gt.geometry();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for &v in band.voxels() {
        if let Some(list) = by_class.get_mut(usize::from(gt.at(v))) {
            list.push(v);
        }
    }
    let mut out = Vec::new();
    for (class, list) in by_class.iter().enumerate() {
        let mut rng = substream(seed, "samples", (u64::from(volume) << 8) | class as u64);
        let mut chosen: Vec<usize> = if list.len() > cap {
            sample(&mut rng, list.len(), cap).into_iter().map(|i| list[i]).collect()
        } else {
            list.clone()
        };
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|v| TrainingSample {
            volume,
            voxel: g.voxel(v),
            label: class as u8,
        }));
    }
    out
}

fn pass_configs(
    features: &FeatureConfig,
    forest: &ForestConfig,
    seed: u64,
    pass: usize,
) -> (FeatureConfig, ForestConfig) {
    let pass_seed = derive_seed(seed, "pass", pass as u64);
    let features = FeatureConfig {
        seed: pass_seed,
        ..features.clone()
    };
    let forest = ForestConfig {
        seed: pass_seed,
        ..forest.clone()
    };
    (features, forest)
}

struct Prepared {
    contexts: Vec<FeatureContext>,
    bands: Vec<Band>,
    samples: Vec<TrainingSample>,
}

fn prepare_training(
    volumes: &[TrainingVolume],
    cfg: &CascadeConfig,
    features: &FeatureConfig,
    seed: u64,
) -> Result<Prepared> {
    let prepared = volumes
        .par_iter()
        .map(|tv| {
            tv.intensity
                .geometry()
                .ensure_same(tv.gt.geometry(), &format!("{}: ground truth", tv.id))?;
            let p = prepare_volume(&tv.intensity, &tv.bone_mask, &tv.landmarks, features)?;
            if p.band.is_empty() {
                return Err(Error::EmptyBand(tv.id.clone()));
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    for (i, (tv, p)) in volumes.iter().zip(&prepared).enumerate() {
        samples.extend(draw_samples(
            i as u32,
            &tv.gt,
            &p.band,
            cfg.samples_per_class_per_volume,
            seed,
        ));
    }
    let (contexts, bands) = prepared.into_iter().map(|p| (p.context, p.band)).unzip();
    Ok(Prepared {
        contexts,
        bands,
        samples,
    })
}

/// Trains passes `1..=num_passes`; `context_maps(k, contexts)` supplies the
/// pass-k training maps from the forests trained so far.
fn train_passes(
    prep: &Prepared,
    cfg: &CascadeConfig,
    features: &FeatureConfig,
    forest: &ForestConfig,
    seed: u64,
    mut context_maps: impl FnMut(&[RandomForest], &[FeatureContext]) -> Result<Vec<ProbabilityMaps>>,
) -> Result<Vec<RandomForest>> {
    let mut passes: Vec<RandomForest> = Vec::with_capacity(cfg.num_passes);
    let mut contexts = prep.contexts.clone();
    for pass in 1..=cfg.num_passes {
        if pass >= 2 {
            let maps = context_maps(&passes, &contexts)?;
            contexts = prep
                .contexts
                .iter()
                .zip(maps)
                .map(|(c, m)| c.with_prob_maps(m))
                .collect::<Result<_>>()?;
        }
        let (fc, rc) = pass_configs(features, forest, seed, pass);
        log::info!(
            "training pass {pass}: {} samples, {} trees",
            prep.samples.len(),
            rc.num_trees
        );
        passes.push(train_forest(&prep.samples, &contexts, &fc, &rc, pass, NUM_CLASSES)?);
    }
    Ok(passes)
}

/// Trains a cascade. Pass-k training maps are the output of the shipped
/// pass-(k−1) forest on its own training volumes, unless
/// `cfg.cross_context` asks for 2-fold cross-prediction by subject.
pub fn train_cascade(
    volumes: &[TrainingVolume],
    cfg: &CascadeConfig,
    features: &FeatureConfig,
    forest: &ForestConfig,
    seed: u64,
) -> Result<CascadeModel> {
    cfg.validate()?;
    features.validate()?;
    forest.validate()?;
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("no training volumes".into()));
    }
    let prep = prepare_training(volumes, cfg, features, seed)?;
    let passes = if cfg.cross_context && cfg.num_passes >= 2 {
        let halves = split_by_subject(volumes)?;
        // Shadow cascades trained on one half predict the other half.
        let mut shadow_maps: Vec<Vec<ProbabilityMaps>> = vec![Vec::new(); volumes.len()];
        for (own, other) in [(&halves[0], &halves[1]), (&halves[1], &halves[0])] {
            let sub: Vec<TrainingVolume> = own.iter().map(|&i| volumes[i].clone()).collect();
            let shadow_cfg = CascadeConfig {
                num_passes: cfg.num_passes - 1,
                cross_context: false,
                ..cfg.clone()
            };
            let shadow = train_cascade(
                &sub,
                &shadow_cfg,
                features,
                forest,
                derive_seed(seed, "shadow", own[0] as u64),
            )?;
            for &i in other.iter() {
                let p = PreparedVolume {
                    context: prep.contexts[i].clone(),
                    band: prep.bands[i].clone(),
                };
                shadow_maps[i] = infer_prepared(&shadow, &p)?;
            }
        }
        train_passes(&prep, cfg, features, forest, seed, |done, _| {
            Ok(shadow_maps.iter().map(|m| m[done.len() - 1].clone()).collect())
        })?
    } else {
        train_passes(&prep, cfg, features, forest, seed, |done, contexts| {
            let last = done.last().expect("pass 1 is trained first");
            contexts
                .par_iter()
                .zip(&prep.bands)
                .map(|(c, b)| predict_volume(last, c, b))
                .collect()
        })?
    };
    CascadeModel::new(
        passes,
        cfg.clone(),
        Palette::cartilage(),
        Some(volumes[0].intensity.spacing()),
    )
}

fn split_by_subject(volumes: &[TrainingVolume]) -> Result<[Vec<usize>; 2]> {
    let subjects: Vec<&str> = {
        let mut s: Vec<&str> = volumes.iter().map(|v| v.subject.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    if subjects.len() < 2 {
        return Err(Error::InsufficientSubjects {
            subjects: subjects.len(),
            folds: 2,
        });
    }
    let mut halves = [Vec::new(), Vec::new()];
    for (i, v) in volumes.iter().enumerate() {
        let rank = subjects.binary_search(&v.subject.as_str()).expect("subject listed");
        halves[rank % 2].push(i);
    }
    Ok(halves)
}

/// Probability maps after every pass, in order.
pub fn infer_prepared(model: &CascadeModel, volume: &PreparedVolume) -> Result<Vec<ProbabilityMaps>> {
    let mut out: Vec<ProbabilityMaps> = Vec::with_capacity(model.num_passes());
    for forest in model.passes() {
        let ctx = match out.last() {
            Some(prev) => volume.context.with_prob_maps(prev.clone())?,
            None => volume.context.without_prob_maps(),
        };
        out.push(predict_volume(forest, &ctx, &volume.band)?);
    }
    Ok(out)
}

/// Runs every pass and returns the final cartilage maps together with the
/// band they cover.
pub fn infer_cascade(
    model: &CascadeModel,
    intensity: &Volume,
    bone_mask: &LabelVolume,
    landmarks: &[LandmarkSet],
) -> Result<(ProbabilityMaps, Band)> {
    if let Some(train) = model.training_spacing() {
        let s = intensity.spacing();
        if s.iter()
            .zip(&train)
            .any(|(a, b)| (a - b).abs() > 1e-6 * b.abs().max(1.0))
        {
            log::warn!("volume spacing {s:?} differs from training spacing {train:?}; features are in mm, continuing");
        }
    }
    let prepared = prepare_volume(intensity, bone_mask, landmarks, model.feature_config())?;
    if prepared.band.is_empty() {
        return Err(Error::EmptyBand("inference volume".into()));
    }
    let mut maps = infer_prepared(model, &prepared)?;
    Ok((maps.pop().expect("at least one pass"), prepared.band))
}

/// Split-node descriptor counts by kind for one pass; every kind is present.
pub type FeatureFrequency = BTreeMap<FeatureKind, usize>;

/// Per-pass feature usage over all internal nodes.
pub fn feature_frequency(model: &CascadeModel) -> Vec<FeatureFrequency> {
    model
        .passes()
        .iter()
        .map(|forest| {
            let mut counts: FeatureFrequency = FeatureKind::ALL.into_iter().map(|k| (k, 0)).collect();
            for tree in forest.trees() {
                for f in tree.split_features() {
                    *counts.entry(f.kind()).or_default() += 1;
                }
            }
            counts
        })
        .collect()
}
