//! Dataset manifests.
//!
//! A manifest is a CSV table with columns
//! `subject_id,volume_path,bone_mask_path,landmarks_path,gt_path`. Relative
//! paths are resolved against the manifest's directory; `gt_path` may be
//! empty for unlabelled volumes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::TrainingVolume;
use crate::distance::{csv_error, load_landmarks, LandmarkSet};
use crate::volume::{load_label_volume, load_volume, LabelVolume, Volume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub volume_path: PathBuf,
    pub bone_mask_path: PathBuf,
    pub landmarks_path: PathBuf,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub gt_path: Option<PathBuf>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<PathBuf>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.trim().is_empty()).map(PathBuf::from))
}

impl ManifestEntry {
    /// Volume identifier: the intensity file name without extension.
    pub fn volume_id(&self) -> String {
        let stem = self
            .volume_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        stem.strip_suffix("_image").map(str::to_owned).unwrap_or(stem)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

/// A manifest entry with its files read.
#[derive(Debug, Clone)]
pub struct LoadedVolume {
    pub id: String,
    pub subject: String,
    pub intensity: Volume,
    pub bone_mask: LabelVolume,
    pub landmarks: Vec<LandmarkSet>,
    pub gt: Option<LabelVolume>,
}

impl LoadedVolume {
    pub fn into_training(self) -> Result<TrainingVolume> {
        let gt = self
            .gt
            .ok_or_else(|| Error::InvalidArgument(format!("volume {} has no ground truth", self.id)))?;
        Ok(TrainingVolume {
            id: self.id,
            subject: self.subject,
            intensity: self.intensity,
            bone_mask: self.bone_mask,
            landmarks: self.landmarks,
            gt,
        })
    }
}

impl Manifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Self {
        Manifest { root, entries }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.subject_id) {
                out.push(e.subject_id.clone());
            }
        }
        out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let entries = r
            .deserialize::<ManifestEntry>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_error(path, e))?;
        if entries.is_empty() {
            return Err(Error::Csv(format!("{}: manifest lists no volumes", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<LoadedVolume> {
        let intensity = load_volume(self.resolve(&e.volume_path))?;
        let bone_mask = load_label_volume(self.resolve(&e.bone_mask_path))?;
        let landmarks = load_landmarks(self.resolve(&e.landmarks_path))?;
        let gt = e
            .gt_path
            .as_ref()
            .map(|p| load_label_volume(self.resolve(p)))
            .transpose()?;
        let g = intensity.geometry();
        g.ensure_same(bone_mask.geometry(), &format!("{}: bone mask", e.volume_id()))?;
        if let Some(gt) = &gt {
            g.ensure_same(gt.geometry(), &format!("{}: ground truth", e.volume_id()))?;
        }
        Ok(LoadedVolume {
            id: e.volume_id(),
            subject: e.subject_id.clone(),
            intensity,
            bone_mask,
            landmarks,
            gt,
        })
    }

    pub fn load_all(&self) -> Result<Vec<LoadedVolume>> {
        self.entries.iter().map(|e| self.load_entry(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(
            dir.path().to_path_buf(),
            vec![
                ManifestEntry {
                    subject_id: "a".into(),
                    volume_path: "a_v0_image.mhd".into(),
                    bone_mask_path: "a_v0_bones.mhd".into(),
                    landmarks_path: "a_v0_landmarks.csv".into(),
                    gt_path: Some("a_v0_gt.mhd".into()),
                },
                ManifestEntry {
                    subject_id: "b".into(),
                    volume_path: "b.mhd".into(),
                    bone_mask_path: "b_bones.mhd".into(),
                    landmarks_path: "b.csv".into(),
                    gt_path: None,
                },
            ],
        );
        let path = dir.path().join("manifest.csv");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("subject_id,volume_path,bone_mask_path,landmarks_path,gt_path"));
        assert_eq!(Manifest::load(&path).unwrap(), m);
        assert_eq!(m.entries()[0].volume_id(), "a_v0");
        assert_eq!(m.subjects(), vec!["a", "b"]);
    }
}
