//! Dense voxel grids and elementary image operators.
//!
//! Data is stored row-major with x varying fastest: the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

mod io;

pub use io::{load_label_volume, load_volume, save_label_volume, save_volume};

use serde::{Deserialize, Serialize};

use crate::labels::Palette;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelIndex {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        VoxelIndex { x, y, z }
    }
}

/// A point in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        WorldPoint { x, y, z }
    }

    pub fn distance(&self, other: &WorldPoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Grid extent, voxel size and placement shared by paired volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing {spacing:?} must be strictly positive"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("origin {origin:?} must be finite")));
        }
        Ok(Geometry { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Geometry::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: VoxelIndex) -> usize {
        i.x + self.dims[0] * (i.y + self.dims[1] * i.z)
    }

    #[inline]
    pub fn voxel(&self, linear: usize) -> VoxelIndex {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        VoxelIndex::new(x, rest % self.dims[1], rest / self.dims[1])
    }

    pub fn contains(&self, i: VoxelIndex) -> bool {
        i.x < self.dims[0] && i.y < self.dims[1] && i.z < self.dims[2]
    }

    pub fn voxel_to_world(&self, i: VoxelIndex) -> WorldPoint {
        WorldPoint::new(
            self.origin[0] + i.x as f64 * self.spacing[0],
            self.origin[1] + i.y as f64 * self.spacing[1],
            self.origin[2] + i.z as f64 * self.spacing[2],
        )
    }

    /// Nearest voxel to `p`. Points outside the grid are clamped to the
    /// boundary and reported with `clamped = true`.
    pub fn world_to_voxel(&self, p: WorldPoint) -> (VoxelIndex, bool) {
        let mut clamped = false;
        let mut idx = [0usize; 3];
        for (axis, c) in [p.x, p.y, p.z].into_iter().enumerate() {
            let r = ((c - self.origin[axis]) / self.spacing[axis]).round();
            let max = (self.dims[axis] - 1) as f64;
            // NaN also lands here and is clamped to 0.
            let v = if r >= 0.0 && r <= max {
                r
            } else {
                clamped = true;
                if r > max {
                    max
                } else {
                    0.0
                }
            };
            idx[axis] = v as usize;
        }
        (VoxelIndex::new(idx[0], idx[1], idx[2]), clamped)
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Linear indices of the 6-neighbours of `linear` in the +x, +y, +z
    /// directions, with the centre-to-centre distance in millimetres.
    pub(crate) fn forward_neighbors(&self, linear: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let v = self.voxel(linear);
        let strides = [1, self.dims[0], self.dims[0] * self.dims[1]];
        let coords = [v.x, v.y, v.z];
        (0..3)
            .filter(move |&axis| coords[axis] + 1 < self.dims[axis])
            .map(move |axis| (linear + strides[axis], self.spacing[axis]))
    }
}

/// Dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::DataLengthMismatch {
                expected: geometry.len(),
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        assert!(value.is_finite());
        Volume {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(VoxelIndex) -> f32) -> Result<Self> {
        let data = (0..geometry.len()).map(|i| f(geometry.voxel(i))).collect();
        Volume::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, linear: usize) -> f32 {
        self.data[linear]
    }

    #[inline]
    pub fn get(&self, i: VoxelIndex) -> f32 {
        self.data[self.geometry.linear(i)]
    }

    pub fn voxel_to_world(&self, i: VoxelIndex) -> WorldPoint {
        self.geometry.voxel_to_world(i)
    }

    pub fn world_to_voxel(&self, p: WorldPoint) -> (VoxelIndex, bool) {
        self.geometry.world_to_voxel(p)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Dense categorical volume with a label palette.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Vec<u8>,
    palette: Palette,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u8>, palette: Palette) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::DataLengthMismatch {
                expected: geometry.len(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| !palette.contains(l)) {
            return Err(Error::InvalidArgument(format!("label {bad} is not in the palette")));
        }
        Ok(LabelVolume {
            geometry,
            labels,
            palette,
        })
    }

    pub fn filled(geometry: Geometry, label: u8, palette: Palette) -> Result<Self> {
        LabelVolume::new(geometry, vec![label; geometry.len()], palette)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    #[inline]
    pub fn at(&self, linear: usize) -> u8 {
        self.labels[linear]
    }

    #[inline]
    pub fn get(&self, i: VoxelIndex) -> u8 {
        self.labels[self.geometry.linear(i)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Gradient magnitude by central differences, one-sided at the faces.
pub fn gradient_magnitude(v: &Volume) -> Result<Volume> {
    let g = *v.geometry();
    let [nx, ny, nz] = g.dims;
    if g.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument(format!(
            "gradient needs at least 2 voxels along every axis, got {:?}",
            g.dims
        )));
    }
    let strides = [1, nx, nx * ny];
    let data = v.data();
    let mut out = vec![0f32; data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.linear(VoxelIndex::new(x, y, z));
                let coords = [x, y, z];
                let mut sq = 0f64;
                for axis in 0..3 {
                    let n = g.dims[axis];
                    let c = coords[axis];
                    let s = strides[axis];
                    let h = g.spacing[axis];
                    let d = if c == 0 {
                        (f64::from(data[i + s]) - f64::from(data[i])) / h
                    } else if c == n - 1 {
                        (f64::from(data[i]) - f64::from(data[i - s])) / h
                    } else {
                        (f64::from(data[i + s]) - f64::from(data[i - s])) / (2.0 * h)
                    };
                    sq += d * d;
                }
                out[i] = sq.sqrt() as f32;
            }
        }
    }
    Volume::new(g, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_to_world_examples() {
        let g = Geometry::unit([8, 8, 8]).unwrap();
        assert_eq!(
            g.voxel_to_world(VoxelIndex::new(2, 3, 4)),
            WorldPoint::new(2.0, 3.0, 4.0)
        );
        let g = Geometry::new([8, 8, 8], [0.5, 1.0, 2.0], [0.0; 3]).unwrap();
        assert_eq!(
            g.voxel_to_world(VoxelIndex::new(2, 2, 2)),
            WorldPoint::new(1.0, 2.0, 4.0)
        );
    }

    #[test]
    fn world_voxel_round_trip() {
        let g = Geometry::new([4, 4, 4], [0.365, 0.365, 0.7], [-3.0, 1.5, 10.0]).unwrap();
        for i in 0..g.len() {
            let v = g.voxel(i);
            assert_eq!(g.linear(v), i);
            assert_eq!(g.world_to_voxel(g.voxel_to_world(v)), (v, false));
        }
    }

    #[test]
    fn world_to_voxel_clamps_with_flag() {
        let g = Geometry::unit([4, 4, 4]).unwrap();
        assert_eq!(
            g.world_to_voxel(WorldPoint::new(-5.0, 1.2, 9.0)),
            (VoxelIndex::new(0, 1, 3), true)
        );
    }

    #[test]
    fn rejects_bad_geometry_and_data() {
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([0, 2, 2], [1.0; 3], [0.0; 3]).is_err());
        let g = Geometry::unit([2, 2, 2]).unwrap();
        assert!(matches!(
            Volume::new(g, vec![0.0; 7]),
            Err(Error::DataLengthMismatch { expected: 8, found: 7 })
        ));
        let mut d = vec![0.0; 8];
        d[3] = f32::NAN;
        assert!(matches!(Volume::new(g, d), Err(Error::NonFinite(3))));
        assert!(LabelVolume::new(g, vec![9; 8], Palette::cartilage()).is_err());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let v = Volume::filled(Geometry::unit([4, 5, 6]).unwrap(), 3.5);
        assert!(gradient_magnitude(&v).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_of_ramp_is_exact_to_the_edge() {
        let g = Geometry::unit([6, 5, 4]).unwrap();
        let v = Volume::from_fn(g, |i| 2.0 * i.x as f32).unwrap();
        let gm = gradient_magnitude(&v).unwrap();
        assert!(gm.data().iter().all(|&m| (m - 2.0).abs() < 1e-6));
    }

    #[test]
    fn gradient_respects_spacing() {
        let g = Geometry::new([5, 3, 3], [0.5, 1.0, 1.0], [0.0; 3]).unwrap();
        // I = 2 * x_mm
        let v = Volume::from_fn(g, |i| 2.0 * (i.x as f32 * 0.5)).unwrap();
        let gm = gradient_magnitude(&v).unwrap();
        assert!(gm.data().iter().all(|&m| (m - 2.0).abs() < 1e-6));
    }

    #[test]
    fn gradient_rejects_flat_axis() {
        let v = Volume::filled(Geometry::unit([4, 1, 4]).unwrap(), 0.0);
        assert!(gradient_magnitude(&v).is_err());
    }
}
