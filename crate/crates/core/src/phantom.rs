//! Deterministic synthetic knee phantoms.
//!
//! World axes: x lateral, y anterior, z superior. Three ellipsoidal bones
//! stand in for femur (top), tibia (bottom) and patella (front of the
//! femur). Each bone carries a cartilage shell on the part of its surface
//! that faces the joint, and a fixed set of parametric surface points that
//! serve as registered landmarks.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, ManifestEntry};
use crate::distance::{save_landmarks, signed_distance_transform, LandmarkSet};
use crate::labels::{Bone, Palette, BACKGROUND};
use crate::rng::substream;
use crate::volume::{save_label_volume, save_volume, Geometry, LabelVolume, Volume, VoxelIndex, WorldPoint};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoneShape {
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
    /// Direction (in the ellipsoid's unit-sphere frame) the cartilage faces.
    pub facing: [f64; 3],
    /// Fraction of the surface covered by cartilage, in (0, 1].
    pub coverage: f64,
}

impl Default for BoneShape {
    fn default() -> Self {
        BoneShape {
            center_mm: [32.0; 3],
            radii_mm: [10.0; 3],
            facing: [0.0, 0.0, 1.0],
            coverage: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Femur, tibia, patella.
    pub bones: [BoneShape; 3],
    /// Per-subject center displacement bound, per component.
    pub center_jitter_mm: f64,
    /// Per-subject relative radius change bound.
    pub radius_jitter: f64,
    /// Per-visit rigid translation bound, per component.
    pub visit_jitter_mm: f64,
    /// Cartilage thickness at the rim and at the centre of the sector.
    pub thickness_mm: [f64; 2],
    pub landmarks_per_bone: usize,
    pub bone_intensity: f32,
    pub cartilage_intensity: f32,
    pub background_intensity: f32,
    /// Noise std of cartilage and background; bone uses half of it.
    pub noise_std: f32,
    /// Multiplicative bias field amplitude (0.1 = ±10 %).
    pub bias_amplitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            bones: [
                BoneShape {
                    center_mm: [32.0, 30.0, 47.0],
                    radii_mm: [21.0, 15.0, 13.0],
                    facing: [0.0, 0.6, -1.0],
                    coverage: 0.35,
                },
                BoneShape {
                    center_mm: [32.0, 30.0, 15.0],
                    radii_mm: [21.0, 15.0, 10.0],
                    facing: [0.0, 0.0, 1.0],
                    coverage: 0.3,
                },
                BoneShape {
                    center_mm: [32.0, 53.0, 44.0],
                    radii_mm: [10.0, 4.0, 10.0],
                    facing: [0.0, -1.0, 0.0],
                    coverage: 0.4,
                },
            ],
            center_jitter_mm: 1.0,
            radius_jitter: 0.04,
            visit_jitter_mm: 1.0,
            thickness_mm: [2.0, 3.5],
            landmarks_per_bone: 16,
            bone_intensity: 40.0,
            cartilage_intensity: 120.0,
            background_intensity: 100.0,
            noise_std: 20.0,
            bias_amplitude: 0.1,
        }
    }
}

/// Maximum cartilage thickness the generator accepts.
pub const MAX_THICKNESS_MM: f64 = 6.0;

impl PhantomSpec {
    /// The default layout scaled to a `dims` grid.
    pub fn with_dims(dims: [usize; 3]) -> Self {
        PhantomSpec::default().resized(dims)
    }

    /// Scales centres, radii and jitter bounds so the layout fills a `dims`
    /// grid the way it filled the current one.
    pub fn resized(&self, dims: [usize; 3]) -> Self {
        let scale: [f64; 3] = [0, 1, 2].map(|a| dims[a] as f64 / self.dims[a].max(1) as f64);
        let mut spec = PhantomSpec { dims, ..self.clone() };
        for bone in &mut spec.bones {
            for (a, s) in scale.iter().enumerate() {
                bone.center_mm[a] *= s;
                bone.radii_mm[a] *= s;
            }
        }
        let s = scale.iter().copied().fold(f64::INFINITY, f64::min);
        spec.center_jitter_mm *= s;
        spec.visit_jitter_mm *= s;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        let [t0, t1] = self.thickness_mm;
        if !(t0 >= 0.0 && t1 >= t0 && t1 <= MAX_THICKNESS_MM) {
            return bad(format!(
                "thickness range {t0}..{t1} mm must satisfy 0 <= min <= max <= {MAX_THICKNESS_MM}"
            ));
        }
        for (bone, shape) in Bone::ALL.iter().zip(&self.bones) {
            if !(shape.coverage > 0.0 && shape.coverage <= 1.0) {
                return bad(format!("{bone} coverage {} outside (0, 1]", shape.coverage));
            }
            if shape.radii_mm.iter().any(|&r| !(r > 0.0)) {
                return bad(format!("{bone} radii must be positive"));
            }
            if norm(shape.facing) == 0.0 {
                return bad(format!("{bone} facing direction is zero"));
            }
        }
        if !(self.radius_jitter >= 0.0 && self.radius_jitter < 0.5) {
            return bad(format!("radius_jitter {} outside [0, 0.5)", self.radius_jitter));
        }
        if !(self.center_jitter_mm >= 0.0 && self.visit_jitter_mm >= 0.0) {
            return bad("jitter bounds must be non-negative".into());
        }
        if !(self.noise_std >= 0.0) || !(0.0..1.0).contains(&self.bias_amplitude) {
            return bad("noise_std must be >= 0 and bias_amplitude in [0, 1)".into());
        }
        if self.landmarks_per_bone == 0 {
            return bad("landmarks_per_bone must be at least 1".into());
        }
        // Bounding boxes at maximal jitter must stay apart.
        let boxes: Vec<[[f64; 2]; 3]> = self
            .bones
            .iter()
            .map(|b| {
                [0, 1, 2].map(|a| {
                    let r = b.radii_mm[a] * (1.0 + self.radius_jitter) + self.center_jitter_mm;
                    [b.center_mm[a] - r, b.center_mm[a] + r]
                })
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let overlap = (0..3).all(|a| boxes[i][a][0] < boxes[j][a][1] && boxes[j][a][0] < boxes[i][a][1]);
                if overlap {
                    return Err(Error::IntersectingBones(Bone::ALL[i].name(), Bone::ALL[j].name()));
                }
            }
        }
        Ok(())
    }
}

/// One generated volume with its inputs and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub intensity: Volume,
    pub bone_mask: LabelVolume,
    pub landmarks: Vec<LandmarkSet>,
    pub gt: LabelVolume,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// `n` nearly uniform directions on the unit sphere.
fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    facing: [f64; 3],
    /// Cosine of the sector half-angle.
    min_dot: f64,
}

impl Ellipsoid {
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.radii[a])
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        let q = self.local(p);
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
    }

    /// Position within the cartilage sector: 0 at the rim, 1 at the centre,
    /// `None` outside.
    fn sector(&self, p: [f64; 3]) -> Option<f64> {
        let q = self.local(p);
        if norm(q) == 0.0 {
            return None;
        }
        let u = unit(q);
        let dot = u[0] * self.facing[0] + u[1] * self.facing[1] + u[2] * self.facing[2];
        if self.min_dot <= -1.0 {
            return Some(1.0);
        }
        (dot >= self.min_dot).then(|| ((dot - self.min_dot) / (1.0 - self.min_dot)).clamp(0.0, 1.0))
    }
}

fn jitter<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn subject_bones(spec: &PhantomSpec, subject: u64, visit: u64) -> [Ellipsoid; 3] {
    let mut srng = substream(spec.seed, "phantom-subject", subject);
    let mut vrng = substream(spec.seed, "phantom-visit", subject * 1024 + visit);
    let shift: [f64; 3] = [0, 1, 2].map(|_| jitter(&mut vrng, spec.visit_jitter_mm));
    let shapes = spec.bones.clone();
    shapes.map(|b| {
        let center = [0, 1, 2].map(|a| b.center_mm[a] + jitter(&mut srng, spec.center_jitter_mm) + shift[a]);
        let radii = [0, 1, 2].map(|a| b.radii_mm[a] * (1.0 + jitter(&mut srng, spec.radius_jitter)));
        Ellipsoid {
            center,
            radii,
            facing: unit(b.facing),
            min_dot: 1.0 - 2.0 * b.coverage,
        }
    })
}

/// First visit of `subject`.
pub fn generate_phantom(spec: &PhantomSpec, subject: u64) -> Result<Phantom> {
    generate_visit(spec, subject, 0)
}

/// Visit `visit` of `subject`: same anatomy as the other visits, shifted
/// by a small rigid translation, with fresh noise and bias.
pub fn generate_visit(spec: &PhantomSpec, subject: u64, visit: u64) -> Result<Phantom> {
    spec.validate()?;
    let g = Geometry::new(spec.dims, spec.spacing, [0.0; 3])?;
    let bones = subject_bones(spec, subject, visit);
    let world = |v: VoxelIndex| {
        let p = g.voxel_to_world(v);
        [p.x, p.y, p.z]
    };

    let mut mask = vec![BACKGROUND; g.len()];
    for (i, m) in mask.iter_mut().enumerate() {
        let p = world(g.voxel(i));
        if let Some(b) = bones.iter().position(|e| e.inside(p)) {
            *m = Bone::ALL[b].label();
        }
    }
    let bone_mask = LabelVolume::new(g, mask, Palette::bones())?;
    let distances = Bone::ALL
        .iter()
        .map(|b| signed_distance_transform(&bone_mask, b.label()))
        .collect::<Result<Vec<_>>>()?;

    let [t0, t1] = spec.thickness_mm;
    let mut gt = vec![BACKGROUND; g.len()];
    for (i, label) in gt.iter_mut().enumerate() {
        // Nearest bone outside of every bone.
        let (b, d) = (0..3)
            .map(|b| (b, f64::from(distances[b].at(i))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("three bones");
        if d <= 0.0 || d > t1 {
            continue;
        }
        let Some(s) = bones[b].sector(world(g.voxel(i))) else {
            continue;
        };
        let thickness = t0 + (t1 - t0) * s.sqrt();
        if d <= thickness {
            *label = Bone::ALL[b].cartilage();
        }
    }
    let gt = LabelVolume::new(g, gt, Palette::cartilage())?;

    let landmarks = fibonacci_sphere(spec.landmarks_per_bone);
    let landmarks = Bone::ALL
        .iter()
        .zip(&bones)
        .map(|(&bone, e)| {
            let pts = landmarks
                .iter()
                .map(|u| {
                    WorldPoint::new(
                        e.center[0] + e.radii[0] * u[0],
                        e.center[1] + e.radii[1] * u[1],
                        e.center[2] + e.radii[2] * u[2],
                    )
                })
                .collect();
            LandmarkSet::new(bone, pts)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = substream(spec.seed, "phantom-noise", subject * 1024 + visit);
    let direction = unit([0, 1, 2].map(|_| rng.random_range(-1.0..=1.0f64) + 1e-9));
    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
    let half: [f64; 3] = [0, 1, 2].map(|a| (spec.dims[a] as f64 * spec.spacing[a] / 2.0).max(1e-9));
    let mut data = vec![0f32; g.len()];
    for (i, out) in data.iter_mut().enumerate() {
        let p = world(g.voxel(i));
        let (mean, std) = if bone_mask.at(i) != BACKGROUND {
            (spec.bone_intensity, spec.noise_std * 0.5)
        } else if gt.at(i) != BACKGROUND {
            (spec.cartilage_intensity, spec.noise_std)
        } else {
            (spec.background_intensity, spec.noise_std)
        };
        let r: f64 = (0..3).map(|a| direction[a] * (p[a] - half[a]) / half[a]).sum::<f64>() / 3f64.sqrt();
        let bias = 1.0 + spec.bias_amplitude * r.clamp(-1.0, 1.0);
        let z: f32 = noise.sample(&mut rng);
        *out = ((mean + std * z) as f64 * bias) as f32;
    }
    let intensity = Volume::new(g, data)?;
    Ok(Phantom {
        intensity,
        bone_mask,
        landmarks,
        gt,
    })
}

/// Writes `n_subjects × volumes_per_subject` phantoms and their manifest
/// (`manifest.csv`) into `out_dir`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n_subjects: usize,
    volumes_per_subject: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if n_subjects == 0 || volumes_per_subject == 0 {
        return Err(Error::InvalidArgument(
            "need at least one subject and one volume per subject".into(),
        ));
    }
    spec.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jobs: Vec<(usize, usize)> = (0..n_subjects)
        .flat_map(|s| (0..volumes_per_subject).map(move |v| (s, v)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(s, v)| {
            let ph = generate_visit(spec, s as u64, v as u64)?;
            let stem = format!("s{s:03}_v{v}");
            let entry = ManifestEntry {
                subject_id: format!("s{s:03}"),
                volume_path: format!("{stem}_image.mhd").into(),
                bone_mask_path: format!("{stem}_bones.mhd").into(),
                landmarks_path: format!("{stem}_landmarks.csv").into(),
                gt_path: Some(format!("{stem}_gt.mhd").into()),
            };
            save_volume(&ph.intensity, dir.join(&entry.volume_path))?;
            save_label_volume(&ph.bone_mask, dir.join(&entry.bone_mask_path))?;
            save_landmarks(&ph.landmarks, dir.join(&entry.landmarks_path))?;
            save_label_volume(&ph.gt, dir.join(entry.gt_path.as_ref().expect("set above")))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(dir.to_path_buf(), entries);
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec::with_dims([32, 32, 32])
    }

    #[test]
    fn deterministic() {
        let spec = small();
        assert_eq!(generate_phantom(&spec, 3).unwrap(), generate_phantom(&spec, 3).unwrap());
        assert_ne!(
            generate_phantom(&spec, 3).unwrap().intensity,
            generate_phantom(&spec, 4).unwrap().intensity
        );
    }

    #[test]
    fn visits_differ_but_share_landmark_counts() {
        let spec = small();
        let a = generate_visit(&spec, 1, 0).unwrap();
        let b = generate_visit(&spec, 1, 1).unwrap();
        assert_ne!(a.bone_mask, b.bone_mask);
        let counts = |p: &Phantom| p.landmarks.iter().map(LandmarkSet::len).collect::<Vec<_>>();
        assert_eq!(counts(&a), counts(&b));
    }

    #[test]
    fn intersecting_bones_rejected() {
        let mut spec = PhantomSpec::default();
        spec.bones[2].center_mm = spec.bones[0].center_mm;
        assert!(matches!(spec.validate(), Err(Error::IntersectingBones(..))));
    }

    #[test]
    fn sector_coverage() {
        let e = Ellipsoid {
            center: [0.0; 3],
            radii: [1.0; 3],
            facing: [0.0, 0.0, 1.0],
            min_dot: 0.0,
        };
        assert_eq!(e.sector([0.0, 0.0, 2.0]), Some(1.0));
        assert_eq!(e.sector([0.0, 0.0, -2.0]), None);
        assert!(e.sector([1.0, 0.0, 0.0]).is_some());
    }

    #[test]
    fn noiseless_tissues_are_constant() {
        let spec = PhantomSpec {
            noise_std: 0.0,
            bias_amplitude: 0.0,
            ..small()
        };
        let p = generate_phantom(&spec, 0).unwrap();
        for i in 0..p.intensity.data().len() {
            let expected = if p.bone_mask.at(i) != 0 {
                spec.bone_intensity
            } else if p.gt.at(i) != 0 {
                spec.cartilage_intensity
            } else {
                spec.background_intensity
            };
            assert_eq!(p.intensity.at(i), expected);
        }
    }
}
