//! Voxel features and the context they are evaluated against.
//!
//! Seventeen feature kinds are available:
//!
//! | kind            | value at voxel `x`                         |
//! |-----------------|--------------------------------------------|
//! | `Intensity`     | `I(x)`                                     |
//! | `GradMag`       | `‖∇I(x)‖`                                  |
//! | `DistF/T/P`     | signed distance to femur, tibia, patella   |
//! | `SumFT/DiffFT`  | `d_F(x) ± d_T(x)`                          |
//! | `SumFP/DiffFP`  | `d_F(x) ± d_P(x)`                          |
//! | `DistLandmark`  | `‖x − z_ζ‖` for a surface landmark `ζ`     |
//! | `Rsid`          | `I(x + u) − I(x)`                          |
//! | `ProbF/T/P`     | previous-pass cartilage probability        |
//! | `RspdF/T/P`     | `P(x + u) − P(x)` on a probability map     |
//!
//! Offsets `u` are in millimetres. They are converted to voxels with the
//! volume spacing, rounded to the nearest voxel and clamped to the grid.
//! Probability kinds need the maps of a previous pass and are therefore only
//! legal from the second pass on.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{landmarks_by_bone, signed_distance_transform, LandmarkSet};
use crate::labels::Bone;
use crate::volume::{gradient_magnitude, Geometry, LabelVolume, Volume, VoxelIndex};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    Intensity,
    GradMag,
    DistF,
    DistT,
    DistP,
    SumFT,
    DiffFT,
    SumFP,
    DiffFP,
    DistLandmark,
    Rsid,
    ProbF,
    ProbT,
    ProbP,
    RspdF,
    RspdT,
    RspdP,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 17] = [
        FeatureKind::Intensity,
        FeatureKind::GradMag,
        FeatureKind::DistF,
        FeatureKind::DistT,
        FeatureKind::DistP,
        FeatureKind::SumFT,
        FeatureKind::DiffFT,
        FeatureKind::SumFP,
        FeatureKind::DiffFP,
        FeatureKind::DistLandmark,
        FeatureKind::Rsid,
        FeatureKind::ProbF,
        FeatureKind::ProbT,
        FeatureKind::ProbP,
        FeatureKind::RspdF,
        FeatureKind::RspdT,
        FeatureKind::RspdP,
    ];

    pub fn needs_probabilities(self) -> bool {
        self >= FeatureKind::ProbF
    }

    pub fn has_offset(self) -> bool {
        matches!(
            self,
            FeatureKind::Rsid | FeatureKind::RspdF | FeatureKind::RspdT | FeatureKind::RspdP
        )
    }

    /// Stable on-disk code.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        FeatureKind::ALL.get(usize::from(code)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Intensity => "Intensity",
            FeatureKind::GradMag => "GradMag",
            FeatureKind::DistF => "DistF",
            FeatureKind::DistT => "DistT",
            FeatureKind::DistP => "DistP",
            FeatureKind::SumFT => "SumFT",
            FeatureKind::DiffFT => "DiffFT",
            FeatureKind::SumFP => "SumFP",
            FeatureKind::DiffFP => "DiffFP",
            FeatureKind::DistLandmark => "DistLandmark",
            FeatureKind::Rsid => "RSID",
            FeatureKind::ProbF => "ProbF",
            FeatureKind::ProbT => "ProbT",
            FeatureKind::ProbP => "ProbP",
            FeatureKind::RspdF => "RSPD_F",
            FeatureKind::RspdT => "RSPD_T",
            FeatureKind::RspdP => "RSPD_P",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully parameterised feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureDescriptor {
    Intensity,
    GradMag,
    DistF,
    DistT,
    DistP,
    SumFT,
    DiffFT,
    SumFP,
    DiffFP,
    DistLandmark { bone: Bone, index: u32 },
    Rsid { offset_mm: [f32; 3] },
    ProbF,
    ProbT,
    ProbP,
    RspdF { offset_mm: [f32; 3] },
    RspdT { offset_mm: [f32; 3] },
    RspdP { offset_mm: [f32; 3] },
}

impl FeatureDescriptor {
    pub fn kind(&self) -> FeatureKind {
        use FeatureDescriptor as D;
        match self {
            D::Intensity => FeatureKind::Intensity,
            D::GradMag => FeatureKind::GradMag,
            D::DistF => FeatureKind::DistF,
            D::DistT => FeatureKind::DistT,
            D::DistP => FeatureKind::DistP,
            D::SumFT => FeatureKind::SumFT,
            D::DiffFT => FeatureKind::DiffFT,
            D::SumFP => FeatureKind::SumFP,
            D::DiffFP => FeatureKind::DiffFP,
            D::DistLandmark { .. } => FeatureKind::DistLandmark,
            D::Rsid { .. } => FeatureKind::Rsid,
            D::ProbF => FeatureKind::ProbF,
            D::ProbT => FeatureKind::ProbT,
            D::ProbP => FeatureKind::ProbP,
            D::RspdF { .. } => FeatureKind::RspdF,
            D::RspdT { .. } => FeatureKind::RspdT,
            D::RspdP { .. } => FeatureKind::RspdP,
        }
    }

    pub fn offset_mm(&self) -> Option<[f32; 3]> {
        use FeatureDescriptor as D;
        match *self {
            D::Rsid { offset_mm } | D::RspdF { offset_mm } | D::RspdT { offset_mm } | D::RspdP { offset_mm } => {
                Some(offset_mm)
            }
            _ => None,
        }
    }

    /// Builds a descriptor from its kind and the parameters it uses; the
    /// others are ignored.
    pub fn from_parts(kind: FeatureKind, bone: Bone, index: u32, offset_mm: [f32; 3]) -> Self {
        use FeatureDescriptor as D;
        match kind {
            FeatureKind::Intensity => D::Intensity,
            FeatureKind::GradMag => D::GradMag,
            FeatureKind::DistF => D::DistF,
            FeatureKind::DistT => D::DistT,
            FeatureKind::DistP => D::DistP,
            FeatureKind::SumFT => D::SumFT,
            FeatureKind::DiffFT => D::DiffFT,
            FeatureKind::SumFP => D::SumFP,
            FeatureKind::DiffFP => D::DiffFP,
            FeatureKind::DistLandmark => D::DistLandmark { bone, index },
            FeatureKind::Rsid => D::Rsid { offset_mm },
            FeatureKind::ProbF => D::ProbF,
            FeatureKind::ProbT => D::ProbT,
            FeatureKind::ProbP => D::ProbP,
            FeatureKind::RspdF => D::RspdF { offset_mm },
            FeatureKind::RspdT => D::RspdT { offset_mm },
            FeatureKind::RspdP => D::RspdP { offset_mm },
        }
    }

    pub fn is_legal_in_pass(&self, pass: usize) -> bool {
        pass >= 2 || !self.kind().needs_probabilities()
    }
}

impl fmt::Display for FeatureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureDescriptor::DistLandmark { bone, index } => write!(f, "DistLandmark({bone}#{index})"),
            d => match d.offset_mm() {
                Some([x, y, z]) => write!(f, "{}(u=[{x:.2}, {y:.2}, {z:.2}]mm)", d.kind()),
                None => write!(f, "{}", d.kind()),
            },
        }
    }
}

/// Feature pool sampling and band parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Candidate descriptors drawn at every split node.
    pub pool_size: usize,
    /// Componentwise bound on random offsets, in millimetres.
    pub r_max_mm: f64,
    pub band_tau_in_mm: f64,
    pub band_tau_out_mm: f64,
    pub seed: u64,
    /// Whether distance-to-landmark features may be sampled.
    pub landmark_features: bool,
    /// Explicit kind allow-list; `None` means every kind legal in the pass.
    pub kinds: Option<Vec<FeatureKind>>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            pool_size: 100,
            r_max_mm: 30.0,
            band_tau_in_mm: 2.0,
            band_tau_out_mm: 10.0,
            seed: 0,
            landmark_features: true,
            kinds: None,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::InvalidArgument("pool_size must be at least 1".into()));
        }
        if !(self.r_max_mm.is_finite() && self.r_max_mm >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "r_max_mm = {} is invalid",
                self.r_max_mm
            )));
        }
        if !(self.band_tau_in_mm >= 0.0 && self.band_tau_out_mm >= 0.0) {
            return Err(Error::InvalidArgument("band thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// Kinds a pool for `pass` may draw from.
    pub fn legal_kinds(&self, pass: usize, landmark_counts: [usize; 3]) -> Result<Vec<FeatureKind>> {
        if pass == 0 {
            return Err(Error::InvalidArgument("passes are numbered from 1".into()));
        }
        let have_landmarks = self.landmark_features && landmark_counts.iter().any(|&n| n > 0);
        let requested: Vec<FeatureKind> = match &self.kinds {
            Some(kinds) => {
                if pass == 1 {
                    if let Some(k) = kinds.iter().find(|k| k.needs_probabilities()) {
                        return Err(Error::IllegalFeature {
                            feature: k.to_string(),
                            pass,
                        });
                    }
                }
                kinds.clone()
            }
            None => FeatureKind::ALL
                .into_iter()
                .filter(|k| pass >= 2 || !k.needs_probabilities())
                .collect(),
        };
        let legal: Vec<FeatureKind> = requested
            .into_iter()
            .filter(|&k| k != FeatureKind::DistLandmark || have_landmarks)
            .collect();
        if legal.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no feature kinds are available in pass {pass}"
            )));
        }
        Ok(legal)
    }
}

/// Draws `cfg.pool_size` descriptors: a kind uniformly among the legal
/// ones, then its parameters (offsets uniform per component in
/// `[-r_max, r_max]` mm, landmarks uniform over a uniformly chosen bone).
pub fn sample_feature_pool<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &FeatureConfig,
    pass: usize,
    landmark_counts: [usize; 3],
) -> Result<Vec<FeatureDescriptor>> {
    cfg.validate()?;
    let kinds = cfg.legal_kinds(pass, landmark_counts)?;
    let bones: Vec<Bone> = Bone::ALL
        .into_iter()
        .filter(|b| landmark_counts[b.index()] > 0)
        .collect();
    let r = cfg.r_max_mm as f32;
    Ok((0..cfg.pool_size)
        .map(|_| {
            let kind = kinds[rng.random_range(0..kinds.len())];
            let (bone, index) = if kind == FeatureKind::DistLandmark {
                let bone = bones[rng.random_range(0..bones.len())];
                (bone, rng.random_range(0..landmark_counts[bone.index()]) as u32)
            } else {
                (Bone::Femur, 0)
            };
            let offset = if kind.has_offset() {
                if r > 0.0 {
                    [0, 1, 2].map(|_| rng.random_range(-r..=r))
                } else {
                    [0.0; 3]
                }
            } else {
                [0.0; 3]
            };
            FeatureDescriptor::from_parts(kind, bone, index, offset)
        })
        .collect())
}

/// Femoral, tibial and patellar cartilage probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    maps: [Volume; 3],
}

impl ProbabilityMaps {
    pub fn new(maps: [Volume; 3]) -> Result<Self> {
        let g = *maps[0].geometry();
        for m in &maps[1..] {
            g.ensure_same(m.geometry(), "probability maps")?;
        }
        for i in 0..g.len() {
            let (f, t, p) = (maps[0].at(i), maps[1].at(i), maps[2].at(i));
            if [f, t, p].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "probabilities at voxel {i} outside [0, 1]: ({f}, {t}, {p})"
                )));
            }
            if f64::from(f) + f64::from(t) + f64::from(p) > 1.0 + 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "cartilage probabilities at voxel {i} sum above 1"
                )));
            }
        }
        Ok(ProbabilityMaps { maps })
    }

    /// All-zero maps (everything background).
    pub fn zeros(geometry: Geometry) -> Self {
        ProbabilityMaps {
            maps: [0, 1, 2].map(|_| Volume::filled(geometry, 0.0)),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        self.maps[0].geometry()
    }

    pub fn maps(&self) -> &[Volume; 3] {
        &self.maps
    }

    pub fn into_maps(self) -> [Volume; 3] {
        self.maps
    }

    /// Map of cartilage class `c` in 0..3 (femoral, tibial, patellar).
    pub fn map(&self, c: usize) -> &Volume {
        &self.maps[c]
    }

    /// Probability of `label` (0 = background, 1..=3 cartilages) at `linear`.
    /// Background is `1 − P_F − P_T − P_P`, clamped to `[0, 1]`.
    pub fn probability(&self, label: u8, linear: usize) -> f64 {
        match label {
            0 => {
                let s: f64 = self.maps.iter().map(|m| f64::from(m.at(linear))).sum();
                (1.0 - s).clamp(0.0, 1.0)
            }
            l => f64::from(self.maps[usize::from(l) - 1].at(linear)),
        }
    }

    /// Label with the largest probability; ties go to the smaller label.
    pub fn argmax(&self, linear: usize) -> u8 {
        let mut best = 0u8;
        let mut best_p = self.probability(0, linear);
        for l in 1..=3u8 {
            let p = self.probability(l, linear);
            if p > best_p {
                best = l;
                best_p = p;
            }
        }
        best
    }
}

#[derive(Debug)]
struct BaseMaps {
    intensity: Volume,
    gradmag: Volume,
    distances: [Volume; 3],
    landmarks: [LandmarkSet; 3],
}

/// Precomputed per-volume maps every feature reads from. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct FeatureContext {
    base: Arc<BaseMaps>,
    probabilities: Option<Arc<ProbabilityMaps>>,
}

/// Computes gradient magnitude and the three signed bone distances once.
pub fn precompute_context(
    intensity: &Volume,
    bone_mask: &LabelVolume,
    landmarks: &[LandmarkSet],
    prob_maps: Option<ProbabilityMaps>,
) -> Result<FeatureContext> {
    let g = *intensity.geometry();
    g.ensure_same(bone_mask.geometry(), "intensity vs bone mask")?;
    let landmarks = landmarks_by_bone(landmarks)?;
    let gradmag = gradient_magnitude(intensity)?;
    let distances = [
        signed_distance_transform(bone_mask, Bone::Femur.label())?,
        signed_distance_transform(bone_mask, Bone::Tibia.label())?,
        signed_distance_transform(bone_mask, Bone::Patella.label())?,
    ];
    let ctx = FeatureContext {
        base: Arc::new(BaseMaps {
            intensity: intensity.clone(),
            gradmag,
            distances,
            landmarks,
        }),
        probabilities: None,
    };
    match prob_maps {
        Some(p) => ctx.with_prob_maps(p),
        None => Ok(ctx),
    }
}

impl FeatureContext {
    /// Context from already computed maps.
    pub fn from_parts(
        intensity: Volume,
        gradmag: Volume,
        distances: [Volume; 3],
        landmarks: [LandmarkSet; 3],
    ) -> Result<Self> {
        let g = *intensity.geometry();
        g.ensure_same(gradmag.geometry(), "gradient magnitude")?;
        for d in &distances {
            g.ensure_same(d.geometry(), "distance map")?;
        }
        for (bone, set) in Bone::ALL.iter().zip(&landmarks) {
            if set.bone() != *bone {
                return Err(Error::InvalidArgument(format!(
                    "landmark slot for {bone} holds {}",
                    set.bone()
                )));
            }
        }
        Ok(FeatureContext {
            base: Arc::new(BaseMaps {
                intensity,
                gradmag,
                distances,
                landmarks,
            }),
            probabilities: None,
        })
    }

    pub fn with_prob_maps(&self, maps: ProbabilityMaps) -> Result<Self> {
        self.geometry()
            .ensure_same(maps.geometry(), "probability maps vs context")?;
        Ok(FeatureContext {
            base: Arc::clone(&self.base),
            probabilities: Some(Arc::new(maps)),
        })
    }

    pub fn without_prob_maps(&self) -> Self {
        FeatureContext {
            base: Arc::clone(&self.base),
            probabilities: None,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        self.base.intensity.geometry()
    }

    pub fn intensity(&self) -> &Volume {
        &self.base.intensity
    }

    pub fn gradient_magnitude(&self) -> &Volume {
        &self.base.gradmag
    }

    pub fn distance(&self, bone: Bone) -> &Volume {
        &self.base.distances[bone.index()]
    }

    pub fn distances(&self) -> [&Volume; 3] {
        let d = &self.base.distances;
        [&d[0], &d[1], &d[2]]
    }

    pub fn landmarks(&self) -> &[LandmarkSet; 3] {
        &self.base.landmarks
    }

    pub fn landmark_counts(&self) -> [usize; 3] {
        self.base.landmarks.each_ref().map(LandmarkSet::len)
    }

    pub fn prob_maps(&self) -> Option<&ProbabilityMaps> {
        self.probabilities.as_deref()
    }

    pub fn has_prob_maps(&self) -> bool {
        self.probabilities.is_some()
    }

    /// Checks that `f` can be evaluated against this context.
    pub fn check(&self, f: &FeatureDescriptor) -> Result<()> {
        if f.kind().needs_probabilities() && self.probabilities.is_none() {
            return Err(Error::MissingProbabilityMaps(f.to_string()));
        }
        if let FeatureDescriptor::DistLandmark { bone, index } = *f {
            if index as usize >= self.base.landmarks[bone.index()].len() {
                return Err(Error::InvalidArgument(format!("{f}: landmark index out of range")));
            }
        }
        Ok(())
    }

    #[inline]
    fn shifted(&self, v: VoxelIndex, offset_mm: [f32; 3]) -> usize {
        let g = self.geometry();
        let c = [v.x, v.y, v.z];
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let step = (f64::from(offset_mm[axis]) / g.spacing[axis]).round() as isize;
            let max = g.dims[axis] as isize - 1;
            idx[axis] = (c[axis] as isize + step).clamp(0, max) as usize;
        }
        g.linear(VoxelIndex::new(idx[0], idx[1], idx[2]))
    }

    #[inline]
    fn prob(&self, c: usize) -> &Volume {
        // Callers have passed `check`.
        self.probabilities
            .as_ref()
            .expect("probability feature on a context without maps")
            .map(c)
    }

    /// Evaluates `f` at `v`. The descriptor must have passed [`check`](Self::check)
    /// and `v` must lie inside the grid.
    #[inline]
    pub fn value(&self, f: &FeatureDescriptor, v: VoxelIndex) -> f32 {
        use FeatureDescriptor as D;
        let b = &*self.base;
        let i = self.geometry().linear(v);
        let [df, dt, dp] = &b.distances;
        match *f {
            D::Intensity => b.intensity.at(i),
            D::GradMag => b.gradmag.at(i),
            D::DistF => df.at(i),
            D::DistT => dt.at(i),
            D::DistP => dp.at(i),
            D::SumFT => df.at(i) + dt.at(i),
            D::DiffFT => df.at(i) - dt.at(i),
            D::SumFP => df.at(i) + dp.at(i),
            D::DiffFP => df.at(i) - dp.at(i),
            D::DistLandmark { bone, index } => {
                let z = b.landmarks[bone.index()].points()[index as usize];
                self.geometry().voxel_to_world(v).distance(&z) as f32
            }
            D::Rsid { offset_mm } => b.intensity.at(self.shifted(v, offset_mm)) - b.intensity.at(i),
            D::ProbF => self.prob(0).at(i),
            D::ProbT => self.prob(1).at(i),
            D::ProbP => self.prob(2).at(i),
            D::RspdF { offset_mm } => {
                let p = self.prob(0);
                p.at(self.shifted(v, offset_mm)) - p.at(i)
            }
            D::RspdT { offset_mm } => {
                let p = self.prob(1);
                p.at(self.shifted(v, offset_mm)) - p.at(i)
            }
            D::RspdP { offset_mm } => {
                let p = self.prob(2);
                p.at(self.shifted(v, offset_mm)) - p.at(i)
            }
        }
    }
}

/// Checked evaluation of one feature at one voxel.
pub fn evaluate_feature(f: &FeatureDescriptor, v: VoxelIndex, ctx: &FeatureContext) -> Result<f32> {
    if !ctx.geometry().contains(v) {
        return Err(Error::InvalidArgument(format!(
            "voxel {v:?} outside {:?}",
            ctx.geometry().dims
        )));
    }
    ctx.check(f)?;
    Ok(ctx.value(f, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::volume::WorldPoint;

    fn toy_context(intensity: Volume, distances: [Volume; 3]) -> FeatureContext {
        let g = *intensity.geometry();
        let lm = Bone::ALL.map(|b| {
            LandmarkSet::new(b, vec![WorldPoint::new(3.0, 4.0, 0.0), WorldPoint::new(0.0, 0.0, 1.0)]).unwrap()
        });
        let gm = Volume::filled(g, 0.0);
        FeatureContext::from_parts(intensity, gm, distances, lm).unwrap()
    }

    #[test]
    fn distance_combinations() {
        let g = Geometry::unit([2, 2, 2]).unwrap();
        let ctx = toy_context(
            Volume::filled(g, 1.0),
            [Volume::filled(g, 2.0), Volume::filled(g, 3.5), Volume::filled(g, -1.0)],
        );
        let v = VoxelIndex::new(1, 0, 1);
        let eval = |f| evaluate_feature(&f, v, &ctx).unwrap();
        assert_eq!(eval(FeatureDescriptor::DiffFT), -1.5);
        assert_eq!(eval(FeatureDescriptor::SumFT), 5.5);
        assert_eq!(eval(FeatureDescriptor::SumFP), 1.0);
        assert_eq!(eval(FeatureDescriptor::DiffFP), 3.0);
    }

    #[test]
    fn rsid_on_constant_volume_is_zero() {
        let g = Geometry::new([5, 4, 3], [0.5, 1.0, 2.0], [0.0; 3]).unwrap();
        let ctx = toy_context(Volume::filled(g, 7.0), [0, 1, 2].map(|_| Volume::filled(g, 1.0)));
        let mut rng = substream(1, "test", 0);
        for _ in 0..100 {
            let u = [0, 1, 2].map(|_| rng.random_range(-30.0f32..30.0));
            let v = VoxelIndex::new(rng.random_range(0..5), rng.random_range(0..4), rng.random_range(0..3));
            assert_eq!(
                evaluate_feature(&FeatureDescriptor::Rsid { offset_mm: u }, v, &ctx).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn offsets_round_then_clamp() {
        let g = Geometry::new([6, 1, 1], [0.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let ctx = toy_context(
            Volume::from_fn(g, |i| i.x as f32 * 10.0).unwrap(),
            [0, 1, 2].map(|_| Volume::filled(g, 1.0)),
        );
        let rsid = |dx: f32, x: usize| {
            evaluate_feature(
                &FeatureDescriptor::Rsid {
                    offset_mm: [dx, 0.0, 0.0],
                },
                VoxelIndex::new(x, 0, 0),
                &ctx,
            )
            .unwrap()
        };
        // 0.7 mm at 0.5 mm spacing rounds to 1 voxel.
        assert_eq!(rsid(0.7, 2), 10.0);
        assert_eq!(rsid(-1.1, 2), -20.0);
        // Clamped at the far face.
        assert_eq!(rsid(100.0, 2), 30.0);
        assert_eq!(rsid(-100.0, 2), -20.0);
    }

    #[test]
    fn landmark_feature_uses_world_position() {
        let g = Geometry::unit([2, 2, 2]).unwrap();
        let ctx = toy_context(Volume::filled(g, 0.0), [0, 1, 2].map(|_| Volume::filled(g, 1.0)));
        let f = FeatureDescriptor::DistLandmark {
            bone: Bone::Tibia,
            index: 0,
        };
        assert_eq!(evaluate_feature(&f, VoxelIndex::new(0, 0, 0), &ctx).unwrap(), 5.0);
        let bad = FeatureDescriptor::DistLandmark {
            bone: Bone::Tibia,
            index: 2,
        };
        assert!(evaluate_feature(&bad, VoxelIndex::new(0, 0, 0), &ctx).is_err());
    }

    #[test]
    fn probability_features_need_maps() {
        let g = Geometry::unit([3, 3, 3]).unwrap();
        let ctx = toy_context(Volume::filled(g, 0.0), [0, 1, 2].map(|_| Volume::filled(g, 1.0)));
        let v = VoxelIndex::new(1, 1, 1);
        assert!(matches!(
            evaluate_feature(&FeatureDescriptor::ProbF, v, &ctx),
            Err(Error::MissingProbabilityMaps(_))
        ));
        let pf = Volume::from_fn(g, |i| 0.1 * i.x as f32).unwrap();
        let maps = ProbabilityMaps::new([pf, Volume::filled(g, 0.2), Volume::filled(g, 0.0)]).unwrap();
        let ctx = ctx.with_prob_maps(maps).unwrap();
        assert_eq!(evaluate_feature(&FeatureDescriptor::ProbT, v, &ctx).unwrap(), 0.2);
        let zero = FeatureDescriptor::RspdF { offset_mm: [0.0; 3] };
        let shift = FeatureDescriptor::RspdF {
            offset_mm: [1.0, 0.0, 0.0],
        };
        assert_eq!(evaluate_feature(&zero, v, &ctx).unwrap(), 0.0);
        assert!((evaluate_feature(&shift, v, &ctx).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn pool_legality_and_determinism() {
        let cfg = FeatureConfig {
            pool_size: 1000,
            ..FeatureConfig::default()
        };
        let counts = [50, 40, 30];
        let p1 = sample_feature_pool(&mut substream(3, "pool", 0), &cfg, 1, counts).unwrap();
        assert_eq!(p1.len(), 1000);
        assert!(p1.iter().all(|f| !f.kind().needs_probabilities()));
        let p2 = sample_feature_pool(&mut substream(3, "pool", 0), &cfg, 2, counts).unwrap();
        assert!(p2
            .iter()
            .any(|f| matches!(f.kind(), FeatureKind::RspdF | FeatureKind::RspdT | FeatureKind::RspdP)));
        let again = sample_feature_pool(&mut substream(3, "pool", 0), &cfg, 2, counts).unwrap();
        assert_eq!(p2, again);
        for f in &p2 {
            if let Some(u) = f.offset_mm() {
                assert!(u.iter().all(|c| c.abs() <= 30.0));
            }
            if let FeatureDescriptor::DistLandmark { bone, index } = *f {
                assert!((index as usize) < counts[bone.index()]);
            }
        }
    }

    #[test]
    fn pool_config_errors() {
        let cfg = FeatureConfig {
            kinds: Some(vec![FeatureKind::Intensity, FeatureKind::ProbF]),
            ..FeatureConfig::default()
        };
        let mut rng = substream(0, "pool", 0);
        assert!(matches!(
            sample_feature_pool(&mut rng, &cfg, 1, [1, 1, 1]),
            Err(Error::IllegalFeature { pass: 1, .. })
        ));
        assert!(sample_feature_pool(&mut rng, &cfg, 2, [1, 1, 1]).is_ok());
        let no_lm = FeatureConfig {
            landmark_features: false,
            ..FeatureConfig::default()
        };
        let pool = sample_feature_pool(&mut rng, &no_lm, 2, [5, 5, 5]).unwrap();
        assert!(pool.iter().all(|f| f.kind() != FeatureKind::DistLandmark));
    }

    #[test]
    fn kind_codes_round_trip() {
        for k in FeatureKind::ALL {
            assert_eq!(FeatureKind::from_code(k.code()), Some(k));
        }
        assert_eq!(FeatureKind::from_code(17), None);
    }
}
