//! Signed bone distances, registered landmarks and the band of interest.

mod edt;

pub use edt::signed_distance_transform;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::labels::Bone;
use crate::volume::{Geometry, Volume, VoxelIndex, WorldPoint};
use crate::{Error, Result};

/// Ordered surface landmarks of one bone. Position in the list is the
/// anatomical correspondence across subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    bone: Bone,
    points: Vec<WorldPoint>,
}

impl LandmarkSet {
    pub fn new(bone: Bone, points: Vec<WorldPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::MissingLandmarks(format!("{bone} has no landmarks")));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("{bone} landmark {i} is not finite")));
        }
        Ok(LandmarkSet { bone, points })
    }

    pub fn bone(&self) -> Bone {
        self.bone
    }

    pub fn points(&self) -> &[WorldPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Distance in millimetres from `p` to landmark `index` of `landmarks`.
pub fn distance_to_landmark(p: WorldPoint, landmarks: &LandmarkSet, index: usize) -> Result<f64> {
    let z = landmarks.points.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "landmark index {index} out of range for {} ({} points)",
            landmarks.bone,
            landmarks.len()
        ))
    })?;
    Ok(p.distance(z))
}

/// Picks exactly one landmark set per bone, in femur, tibia, patella order.
pub fn landmarks_by_bone(sets: &[LandmarkSet]) -> Result<[LandmarkSet; 3]> {
    let pick = |bone: Bone| -> Result<LandmarkSet> {
        let mut found = sets.iter().filter(|s| s.bone == bone);
        let first = found
            .next()
            .ok_or_else(|| Error::MissingLandmarks(format!("no landmarks for {bone}")))?;
        if found.next().is_some() {
            return Err(Error::InvalidArgument(format!("duplicate landmark sets for {bone}")));
        }
        Ok(first.clone())
    };
    Ok([pick(Bone::Femur)?, pick(Bone::Tibia)?, pick(Bone::Patella)?])
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    bone: String,
    index: usize,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

/// Writes landmarks as CSV with header `bone,index,x_mm,y_mm,z_mm`.
pub fn save_landmarks(sets: &[LandmarkSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for set in sets {
        for (index, p) in set.points.iter().enumerate() {
            w.serialize(LandmarkRow {
                bone: set.bone.name().to_string(),
                index,
                x_mm: p.x,
                y_mm: p.y,
                z_mm: p.z,
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a landmark CSV. The bone column accepts names or mask label ids;
/// indices must run contiguously from 0 within each bone.
pub fn load_landmarks(path: impl AsRef<Path>) -> Result<Vec<LandmarkSet>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut per_bone: [Vec<WorldPoint>; 3] = Default::default();
    for (line, row) in r.deserialize::<LandmarkRow>().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let bone = Bone::from_name(row.bone.trim())
            .or_else(|| row.bone.trim().parse::<u8>().ok().and_then(Bone::from_label))
            .ok_or_else(|| {
                Error::Csv(format!(
                    "{}: row {}: unknown bone `{}`",
                    path.display(),
                    line + 2,
                    row.bone
                ))
            })?;
        let points = &mut per_bone[bone.index()];
        if row.index != points.len() {
            return Err(Error::Csv(format!(
                "{}: {bone} landmark index {} is not contiguous (expected {})",
                path.display(),
                row.index,
                points.len()
            )));
        }
        points.push(WorldPoint::new(row.x_mm, row.y_mm, row.z_mm));
    }
    Bone::ALL
        .into_iter()
        .zip(per_bone)
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(bone, pts)| LandmarkSet::new(bone, pts))
        .collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(format!("{}: {e}", path.display()))
    }
}

/// Voxels within a signed-distance window of at least one bone surface,
/// in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    geometry: Geometry,
    voxels: Vec<usize>,
    member: Vec<bool>,
}

impl Band {
    pub fn from_linear(geometry: Geometry, mut voxels: Vec<usize>) -> Result<Self> {
        voxels.sort_unstable();
        voxels.dedup();
        if let Some(&last) = voxels.last() {
            if last >= geometry.len() {
                return Err(Error::InvalidArgument(format!("band voxel {last} out of range")));
            }
        }
        let mut member = vec![false; geometry.len()];
        for &v in &voxels {
            member[v] = true;
        }
        Ok(Band {
            geometry,
            voxels,
            member,
        })
    }

    /// Every voxel of the grid.
    pub fn full(geometry: Geometry) -> Self {
        Band {
            voxels: (0..geometry.len()).collect(),
            member: vec![true; geometry.len()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// Linear indices in storage order.
    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    pub fn voxel_indices(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        self.voxels.iter().map(|&v| self.geometry.voxel(v))
    }

    #[inline]
    pub fn contains(&self, linear: usize) -> bool {
        self.member[linear]
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// A voxel belongs to the band iff `-tau_in <= d_b(x) <= tau_out` for at
/// least one bone distance map `d_b`.
pub fn extract_band(distances: [&Volume; 3], tau_in: f64, tau_out: f64) -> Result<Band> {
    if !(tau_in >= 0.0 && tau_out >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "band thresholds must be non-negative (tau_in={tau_in}, tau_out={tau_out})"
        )));
    }
    let g = *distances[0].geometry();
    for d in &distances[1..] {
        g.ensure_same(d.geometry(), "band distance maps")?;
    }
    let voxels = (0..g.len())
        .filter(|&i| {
            distances.iter().any(|d| {
                let v = f64::from(d.at(i));
                -tau_in <= v && v <= tau_out
            })
        })
        .collect();
    Band::from_linear(g, voxels)
}
