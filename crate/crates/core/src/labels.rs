//! Label values shared by bone masks and cartilage segmentations.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const BACKGROUND: u8 = 0;
pub const FEMORAL_CARTILAGE: u8 = 1;
pub const TIBIAL_CARTILAGE: u8 = 2;
pub const PATELLAR_CARTILAGE: u8 = 3;

/// Number of classes the classifiers predict (background plus three cartilages).
pub const NUM_CLASSES: usize = 4;

/// The cartilage labels, in probability-map order.
pub const CARTILAGE_LABELS: [u8; 3] = [FEMORAL_CARTILAGE, TIBIAL_CARTILAGE, PATELLAR_CARTILAGE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bone {
    Femur,
    Tibia,
    Patella,
}

impl Bone {
    pub const ALL: [Bone; 3] = [Bone::Femur, Bone::Tibia, Bone::Patella];

    /// Position in per-bone arrays.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Label value of this bone in a bone mask.
    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    /// Cartilage label growing on this bone.
    pub fn cartilage(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_label(label: u8) -> Option<Bone> {
        match label {
            1 => Some(Bone::Femur),
            2 => Some(Bone::Tibia),
            3 => Some(Bone::Patella),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bone::Femur => "femur",
            Bone::Tibia => "tibia",
            Bone::Patella => "patella",
        }
    }

    pub fn from_name(name: &str) -> Option<Bone> {
        Bone::ALL.into_iter().find(|b| b.name() == name)
    }
}

impl fmt::Display for Bone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Label value to name map carried by every label volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(BTreeMap<u8, String>);

impl Palette {
    pub fn new(entries: impl IntoIterator<Item = (u8, String)>) -> Self {
        Palette(entries.into_iter().collect())
    }

    pub fn cartilage() -> Self {
        Palette::new([
            (BACKGROUND, "background".to_string()),
            (FEMORAL_CARTILAGE, "femoral_cartilage".to_string()),
            (TIBIAL_CARTILAGE, "tibial_cartilage".to_string()),
            (PATELLAR_CARTILAGE, "patellar_cartilage".to_string()),
        ])
    }

    pub fn bones() -> Self {
        Palette::new(
            std::iter::once((BACKGROUND, "background".to_string()))
                .chain(Bone::ALL.iter().map(|b| (b.label(), b.name().to_string()))),
        )
    }

    pub fn contains(&self, label: u8) -> bool {
        self.0.contains_key(&label)
    }

    pub fn name(&self, label: u8) -> Option<&str> {
        self.0.get(&label).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &str)> {
        self.0.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
