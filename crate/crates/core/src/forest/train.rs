use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DecisionTree, ForestConfig, RandomForest, TreeNode};
use crate::features::{sample_feature_pool, FeatureConfig, FeatureContext, FeatureDescriptor};
use crate::rng::substream;
use crate::volume::VoxelIndex;
use crate::{Error, Result};

/// Gains at or below this are treated as no improvement.
const MIN_GAIN: f64 = 1e-12;

/// One labelled voxel of one training volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    /// Index into the context slice passed to training.
    pub volume: u32,
    pub voxel: VoxelIndex,
    pub label: u8,
}

fn entropy(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = f64::from(n);
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = f64::from(c) / n;
            -p * p.log2()
        })
        .sum()
}

fn leaf_posterior(counts: &[u32], smoothing: f64) -> Vec<f64> {
    let n: f64 = counts.iter().map(|&c| f64::from(c)).sum();
    let denom = n + smoothing * counts.len() as f64;
    counts.iter().map(|&c| (f64::from(c) + smoothing) / denom).collect()
}

struct Candidate {
    gain: f64,
    feature: FeatureDescriptor,
    threshold: f32,
}

fn validate_inputs(
    samples: &[TrainingSample],
    contexts: &[FeatureContext],
    pass: usize,
    num_classes: usize,
) -> Result<[usize; 3]> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("no training contexts".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    for s in samples {
        let ctx = contexts
            .get(s.volume as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("sample refers to missing volume {}", s.volume)))?;
        if usize::from(s.label) >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} >= {num_classes} classes",
                s.label
            )));
        }
        if !ctx.geometry().contains(s.voxel) {
            return Err(Error::InvalidArgument(format!(
                "sample voxel {:?} outside its volume",
                s.voxel
            )));
        }
    }
    if pass >= 2 && contexts.iter().any(|c| !c.has_prob_maps()) {
        return Err(Error::MissingProbabilityMaps(format!("pass-{pass} training context")));
    }
    let counts = contexts[0].landmark_counts();
    if contexts.iter().any(|c| c.landmark_counts() != counts) {
        return Err(Error::InvalidArgument(
            "training volumes disagree on landmark counts (landmarks must be registered)".into(),
        ));
    }
    Ok(counts)
}

/// Grows one tree on all of `samples`.
///
/// At every node `features.pool_size` descriptors are drawn, each tried
/// with `cfg.thresholds_per_feature` thresholds uniform between the
/// feature's minimum and maximum over the node samples. The pair with the
/// largest Shannon information gain wins (first drawn on ties). Nodes
/// become leaves at `max_depth`, when pure, when too small to give both
/// children `min_samples_leaf` samples, or when no candidate has positive
/// gain.
pub fn train_tree<R: Rng + ?Sized>(
    samples: &[TrainingSample],
    contexts: &[FeatureContext],
    features: &FeatureConfig,
    cfg: &ForestConfig,
    pass: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<DecisionTree> {
    cfg.validate()?;
    features.validate()?;
    let landmark_counts = validate_inputs(samples, contexts, pass, num_classes)?;
    // Fail on configuration errors before growing anything.
    features.legal_kinds(pass, landmark_counts)?;

    let n_thr = cfg.thresholds_per_feature;
    let mut order: Vec<u32> = (0..samples.len() as u32).collect();
    let mut nodes = vec![TreeNode::Leaf { posterior: Vec::new() }];
    let mut stack = vec![(0usize, 0usize, samples.len(), 0usize)];
    let mut values: Vec<f32> = Vec::with_capacity(samples.len());
    let mut thresholds: Vec<f32> = Vec::with_capacity(n_thr);
    let mut hist = vec![0u32; (n_thr + 1) * num_classes];
    let mut scratch: Vec<u32> = Vec::with_capacity(samples.len());

    while let Some((node, start, end, depth)) = stack.pop() {
        let idx = &mut order[start..end];
        let n = idx.len() as u32;
        let mut counts = vec![0u32; num_classes];
        for &s in idx.iter() {
            counts[usize::from(samples[s as usize].label)] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let min_leaf = cfg.min_samples_leaf as u32;
        if depth >= cfg.max_depth || pure || n < 2 * min_leaf || (n as usize) < cfg.min_samples_split {
            nodes[node] = TreeNode::Leaf {
                posterior: leaf_posterior(&counts, cfg.leaf_smoothing),
            };
            continue;
        }

        let parent_entropy = entropy(&counts, n);
        let pool = sample_feature_pool(rng, features, pass, landmark_counts)?;
        let mut best: Option<Candidate> = None;
        for feature in &pool {
            values.clear();
            values.extend(idx.iter().map(|&s| {
                let s = &samples[s as usize];
                contexts[s.volume as usize].value(feature, s.voxel)
            }));
            let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            if !(hi > lo) {
                continue;
            }
            thresholds.clear();
            thresholds.extend((0..n_thr).map(|_| lo + (hi - lo) * rng.random::<f32>()));
            thresholds.sort_by(f32::total_cmp);

            // hist[b][c]: samples of class c with exactly b thresholds <= value.
            hist.iter_mut().for_each(|h| *h = 0);
            for (&v, &s) in values.iter().zip(idx.iter()) {
                let b = thresholds.partition_point(|&t| t <= v);
                hist[b * num_classes + usize::from(samples[s as usize].label)] += 1;
            }
            // Sample goes left of threshold j iff value < t_j, i.e. its bin is <= j.
            let mut left = vec![0u32; num_classes];
            for (j, &t) in thresholds.iter().enumerate() {
                for c in 0..num_classes {
                    left[c] += hist[j * num_classes + c];
                }
                let nl: u32 = left.iter().sum();
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right: Vec<u32> = counts.iter().zip(&left).map(|(a, b)| a - b).collect();
                let gain = parent_entropy
                    - (f64::from(nl) / f64::from(n)) * entropy(&left, nl)
                    - (f64::from(nr) / f64::from(n)) * entropy(&right, nr);
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: *feature,
                        threshold: t,
                    });
                }
            }
        }

        let Some(best) = best.filter(|b| b.gain > MIN_GAIN) else {
            nodes[node] = TreeNode::Leaf {
                posterior: leaf_posterior(&counts, cfg.leaf_smoothing),
            };
            continue;
        };

        // Stable partition: left samples first.
        scratch.clear();
        let mut n_left = 0usize;
        for k in 0..idx.len() {
            let s = idx[k];
            let smp = &samples[s as usize];
            if contexts[smp.volume as usize].value(&best.feature, smp.voxel) < best.threshold {
                idx[n_left] = s;
                n_left += 1;
            } else {
                scratch.push(s);
            }
        }
        idx[n_left..].copy_from_slice(&scratch);

        let left = nodes.len();
        nodes.push(TreeNode::Leaf { posterior: Vec::new() });
        let right = nodes.len();
        nodes.push(TreeNode::Leaf { posterior: Vec::new() });
        nodes[node] = TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: left as u32,
            right: right as u32,
        };
        let mid = start + n_left;
        stack.push((right, mid, end, depth + 1));
        stack.push((left, start, mid, depth + 1));
    }
    DecisionTree::new(nodes, num_classes)
}

/// Trains `cfg.num_trees` trees in parallel. Tree `t` bootstraps and
/// grows from its own stream derived from `cfg.seed`, so the result does
/// not depend on scheduling.
pub fn train_forest(
    samples: &[TrainingSample],
    contexts: &[FeatureContext],
    features: &FeatureConfig,
    cfg: &ForestConfig,
    pass: usize,
    num_classes: usize,
) -> Result<RandomForest> {
    cfg.validate()?;
    validate_inputs(samples, contexts, pass, num_classes)?;
    let trees = (0..cfg.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(cfg.seed, "tree", t as u64);
            if cfg.bootstrap {
                let m = ((samples.len() as f64 * cfg.bagging_fraction).round() as usize).max(1);
                let bag: Vec<TrainingSample> = (0..m).map(|_| samples[rng.random_range(0..samples.len())]).collect();
                train_tree(&bag, contexts, features, cfg, pass, num_classes, &mut rng)
            } else {
                train_tree(samples, contexts, features, cfg, pass, num_classes, &mut rng)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    RandomForest::new(trees, num_classes, pass, features.clone(), cfg.clone())
}
