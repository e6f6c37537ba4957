//! Randomized classification forests over voxel features.

mod io;
mod train;

pub use io::{read_forest, write_forest, FOREST_MAGIC, FOREST_VERSION};
pub use train::{train_forest, train_tree, TrainingSample};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::Band;
use crate::features::{FeatureConfig, FeatureContext, FeatureDescriptor, ProbabilityMaps};
use crate::volume::{Volume, VoxelIndex};
use crate::{Error, Result};

/// Forest shape and training parameters.
///
/// The default mirrors the published setup: 60 trees of depth 18 with
/// 1000 split candidates per node, read as 100 sampled descriptors
/// (`FeatureConfig::pool_size`) times 10 thresholds each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub num_trees: usize,
    /// 0 grows single-leaf trees holding the class prior.
    pub max_depth: usize,
    pub thresholds_per_feature: usize,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    /// Bootstrap sample size as a fraction of the training set.
    pub bagging_fraction: f64,
    /// Draw with replacement; when false every tree sees every sample.
    pub bootstrap: bool,
    /// Additive (Laplace) smoothing of leaf class histograms.
    pub leaf_smoothing: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            num_trees: 60,
            max_depth: 18,
            thresholds_per_feature: 10,
            min_samples_leaf: 5,
            min_samples_split: 10,
            bagging_fraction: 0.66,
            bootstrap: true,
            leaf_smoothing: 1.0,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.num_trees == 0 {
            return bad("num_trees must be at least 1".into());
        }
        if self.thresholds_per_feature == 0 {
            return bad("thresholds_per_feature must be at least 1".into());
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1".into());
        }
        if !(self.bagging_fraction > 0.0 && self.bagging_fraction.is_finite()) {
            return bad(format!("bagging_fraction = {} is invalid", self.bagging_fraction));
        }
        if !(self.leaf_smoothing >= 0.0 && self.leaf_smoothing.is_finite()) {
            return bad(format!("leaf_smoothing = {} is invalid", self.leaf_smoothing));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// Samples with `value < threshold` go left.
    Split {
        feature: FeatureDescriptor,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        posterior: Vec<f64>,
    },
}

/// Binary tree stored as a node array rooted at index 0; children always
/// have larger indices than their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn new(nodes: Vec<TreeNode>, num_classes: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::BadModel("tree has no nodes".into()));
        }
        let mut seen = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            match node {
                TreeNode::Split {
                    left, right, threshold, ..
                } => {
                    if !threshold.is_finite() {
                        return Err(Error::BadModel(format!("node {i} has a non-finite threshold")));
                    }
                    for &c in [left, right] {
                        let c = c as usize;
                        if c <= i || c >= nodes.len() || seen[c] {
                            return Err(Error::BadModel(format!("node {i} has invalid child {c}")));
                        }
                        seen[c] = true;
                    }
                }
                TreeNode::Leaf { posterior } => {
                    let sum: f64 = posterior.iter().sum();
                    if posterior.len() != num_classes
                        || posterior.iter().any(|p| !(*p >= 0.0))
                        || (sum - 1.0).abs() > 1e-6
                    {
                        return Err(Error::BadModel(format!("leaf {i} posterior is not a distribution")));
                    }
                }
            }
        }
        if seen.iter().skip(1).any(|s| !s) {
            return Err(Error::BadModel("tree has unreachable nodes".into()));
        }
        Ok(DecisionTree { nodes })
    }

    /// A single-leaf tree.
    pub fn leaf(posterior: Vec<f64>) -> Result<Self> {
        let n = posterior.len();
        DecisionTree::new(vec![TreeNode::Leaf { posterior }], n)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn split_features(&self) -> impl Iterator<Item = &FeatureDescriptor> {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(feature),
            TreeNode::Leaf { .. } => None,
        })
    }

    pub fn num_internal(&self) -> usize {
        self.split_features().count()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if let TreeNode::Split { left, right, .. } = node {
                let d = depth[i] + 1;
                depth[*left as usize] = d;
                depth[*right as usize] = d;
                max = max.max(d);
            }
        }
        max
    }

    /// Leaf posterior reached by `v`. The context must support every split.
    #[inline]
    pub fn leaf_posterior(&self, ctx: &FeatureContext, v: VoxelIndex) -> &[f64] {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if ctx.value(feature, v) < *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                TreeNode::Leaf { posterior } => return posterior,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    num_classes: usize,
    pass: usize,
    features: FeatureConfig,
    config: ForestConfig,
}

impl RandomForest {
    pub fn new(
        trees: Vec<DecisionTree>,
        num_classes: usize,
        pass: usize,
        features: FeatureConfig,
        config: ForestConfig,
    ) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::BadModel("forest has no trees".into()));
        }
        if pass == 0 {
            return Err(Error::BadModel("pass index must be at least 1".into()));
        }
        for tree in &trees {
            for node in tree.nodes() {
                match node {
                    TreeNode::Leaf { posterior } if posterior.len() != num_classes => {
                        return Err(Error::BadModel("trees disagree on the class count".into()));
                    }
                    TreeNode::Split { feature, .. } if !feature.is_legal_in_pass(pass) => {
                        return Err(Error::IllegalFeature {
                            feature: feature.to_string(),
                            pass,
                        });
                    }
                    _ => {}
                }
            }
        }
        Ok(RandomForest {
            trees,
            num_classes,
            pass,
            features,
            config,
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// 1-based cascade pass this forest was trained for.
    pub fn pass(&self) -> usize {
        self.pass
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    /// Checks that every split of every tree can be evaluated on `ctx`.
    pub fn check_context(&self, ctx: &FeatureContext) -> Result<()> {
        if self.pass >= 2 && !ctx.has_prob_maps() {
            return Err(Error::MissingProbabilityMaps(format!("pass-{} forest", self.pass)));
        }
        for tree in &self.trees {
            for f in tree.split_features() {
                ctx.check(f)?;
            }
        }
        Ok(())
    }

    #[inline]
    fn accumulate(&self, ctx: &FeatureContext, v: VoxelIndex, out: &mut [f64]) {
        out.iter_mut().for_each(|p| *p = 0.0);
        for tree in &self.trees {
            for (o, p) in out.iter_mut().zip(tree.leaf_posterior(ctx, v)) {
                *o += p;
            }
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|p| *p /= n);
    }
}

/// Unweighted mean of the leaf posteriors reached in every tree.
pub fn predict_posterior(forest: &RandomForest, v: VoxelIndex, ctx: &FeatureContext) -> Result<Vec<f64>> {
    if !ctx.geometry().contains(v) {
        return Err(Error::InvalidArgument(format!(
            "voxel {v:?} outside {:?}",
            ctx.geometry().dims
        )));
    }
    forest.check_context(ctx)?;
    let mut out = vec![0.0; forest.num_classes];
    forest.accumulate(ctx, v, &mut out);
    Ok(out)
}

/// Cartilage probability maps over `band`; voxels outside the band are 0.
///
/// Classes 1, 2 and 3 of the forest become the femoral, tibial and
/// patellar maps.
pub fn predict_volume(forest: &RandomForest, ctx: &FeatureContext, band: &Band) -> Result<ProbabilityMaps> {
    if band.is_empty() {
        return Err(Error::InvalidArgument("cannot predict over an empty band".into()));
    }
    if forest.num_classes != 4 {
        return Err(Error::InvalidArgument(format!(
            "volume prediction needs 4 classes, forest has {}",
            forest.num_classes
        )));
    }
    let g = *ctx.geometry();
    g.ensure_same(band.geometry(), "band vs context")?;
    forest.check_context(ctx)?;
    let posteriors: Vec<[f32; 3]> = band
        .voxels()
        .par_iter()
        .map_init(
            || vec![0.0; 4],
            |buf, &lin| {
                forest.accumulate(ctx, g.voxel(lin), buf);
                [buf[1] as f32, buf[2] as f32, buf[3] as f32]
            },
        )
        .collect();
    let mut maps = [0, 1, 2].map(|_| vec![0f32; g.len()]);
    for (&lin, p) in band.voxels().iter().zip(&posteriors) {
        for c in 0..3 {
            maps[c][lin] = p[c];
        }
    }
    let [f, t, p] = maps;
    ProbabilityMaps::new([Volume::new(g, f)?, Volume::new(g, t)?, Volume::new(g, p)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::LandmarkSet;
    use crate::labels::Bone;
    use crate::volume::{Geometry, WorldPoint};

    fn ctx(g: Geometry) -> FeatureContext {
        let lm = Bone::ALL.map(|b| LandmarkSet::new(b, vec![WorldPoint::default()]).unwrap());
        let ramp = Volume::from_fn(g, |i| i.x as f32).unwrap();
        FeatureContext::from_parts(
            ramp,
            Volume::filled(g, 0.0),
            [0, 1, 2].map(|_| Volume::filled(g, 1.0)),
            lm,
        )
        .unwrap()
    }

    fn forest(trees: Vec<DecisionTree>) -> RandomForest {
        RandomForest::new(trees, 4, 1, FeatureConfig::default(), ForestConfig::default()).unwrap()
    }

    #[test]
    fn single_leaf_posterior_is_the_histogram() {
        let g = Geometry::unit([2, 2, 2]).unwrap();
        let f = forest(vec![DecisionTree::leaf(vec![0.1, 0.3, 0.4, 0.2]).unwrap()]);
        let p = predict_posterior(&f, VoxelIndex::new(1, 1, 1), &ctx(g)).unwrap();
        assert_eq!(p, vec![0.1, 0.3, 0.4, 0.2]);
    }

    #[test]
    fn posteriors_average_across_trees() {
        let g = Geometry::unit([2, 2, 2]).unwrap();
        let f = forest(vec![
            DecisionTree::leaf(vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            DecisionTree::leaf(vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
        ]);
        let p = predict_posterior(&f, VoxelIndex::new(0, 0, 0), &ctx(g)).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn splits_route_by_threshold() {
        let g = Geometry::unit([4, 1, 1]).unwrap();
        let tree = DecisionTree::new(
            vec![
                TreeNode::Split {
                    feature: FeatureDescriptor::Intensity,
                    threshold: 1.5,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf {
                    posterior: vec![1.0, 0.0, 0.0, 0.0],
                },
                TreeNode::Leaf {
                    posterior: vec![0.0, 0.0, 1.0, 0.0],
                },
            ],
            4,
        )
        .unwrap();
        assert_eq!(tree.depth(), 1);
        let f = forest(vec![tree]);
        let c = ctx(g);
        assert_eq!(predict_posterior(&f, VoxelIndex::new(1, 0, 0), &c).unwrap()[0], 1.0);
        assert_eq!(predict_posterior(&f, VoxelIndex::new(2, 0, 0), &c).unwrap()[2], 1.0);
    }

    #[test]
    fn malformed_trees_are_rejected() {
        assert!(DecisionTree::leaf(vec![0.5, 0.6]).is_err());
        let cyclic = vec![
            TreeNode::Split {
                feature: FeatureDescriptor::Intensity,
                threshold: 0.0,
                left: 0,
                right: 1,
            },
            TreeNode::Leaf { posterior: vec![1.0] },
        ];
        assert!(DecisionTree::new(cyclic, 1).is_err());
    }

    #[test]
    fn probability_splits_are_illegal_in_pass_one() {
        let tree = DecisionTree::new(
            vec![
                TreeNode::Split {
                    feature: FeatureDescriptor::ProbF,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf {
                    posterior: vec![1.0, 0.0, 0.0, 0.0],
                },
                TreeNode::Leaf {
                    posterior: vec![0.0, 1.0, 0.0, 0.0],
                },
            ],
            4,
        )
        .unwrap();
        let r = RandomForest::new(
            vec![tree.clone()],
            4,
            1,
            FeatureConfig::default(),
            ForestConfig::default(),
        );
        assert!(matches!(r, Err(Error::IllegalFeature { pass: 1, .. })));
        let f2 = RandomForest::new(vec![tree], 4, 2, FeatureConfig::default(), ForestConfig::default()).unwrap();
        let g = Geometry::unit([2, 2, 2]).unwrap();
        assert!(matches!(
            predict_posterior(&f2, VoxelIndex::new(0, 0, 0), &ctx(g)),
            Err(Error::MissingProbabilityMaps(_))
        ));
    }

    #[test]
    fn volume_prediction_is_zero_outside_band() {
        let g = Geometry::unit([3, 3, 3]).unwrap();
        let f = forest(vec![DecisionTree::leaf(vec![0.25, 0.25, 0.25, 0.25]).unwrap()]);
        let band = Band::from_linear(g, vec![13]).unwrap();
        let maps = predict_volume(&f, &ctx(g), &band).unwrap();
        for c in 0..3 {
            let nonzero: Vec<usize> = (0..g.len()).filter(|&i| maps.map(c).at(i) != 0.0).collect();
            assert_eq!(nonzero, vec![13]);
        }
        let empty = Band::from_linear(g, vec![]).unwrap();
        assert!(predict_volume(&f, &ctx(g), &empty).is_err());
    }
}
