//! `SCFMODEL` forest container.
//!
//! ```text
//! magic     8 bytes  "SCFMODEL"
//! version   u32
//! header    u32 length + JSON {num_classes, pass, features, forest}
//! trees     u32 count, then per tree:
//!   nodes   u32 count, then per node a tag byte:
//!     0 split: kind u8, bone u8, landmark u32, offset 3 x f32, threshold f32, left u32, right u32
//!     1 leaf:  num_classes x f64 posterior
//! ```
//!
//! All numbers are little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{DecisionTree, ForestConfig, RandomForest, TreeNode};
use crate::binio::{Reader, Writer};
use crate::features::{FeatureConfig, FeatureDescriptor, FeatureKind};
use crate::labels::Bone;
use crate::{Error, Result};

pub const FOREST_MAGIC: &[u8; 8] = b"SCFMODEL";
pub const FOREST_VERSION: u32 = 1;

const TAG_SPLIT: u8 = 0;
const TAG_LEAF: u8 = 1;
const MAX_HEADER: usize = 1 << 20;

#[derive(Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    pass: usize,
    features: FeatureConfig,
    forest: ForestConfig,
}

fn write_feature<W: Write>(w: &mut Writer<W>, f: &FeatureDescriptor) -> std::io::Result<()> {
    let (bone, index) = match *f {
        FeatureDescriptor::DistLandmark { bone, index } => (bone, index),
        _ => (Bone::Femur, 0),
    };
    w.u8(f.kind().code())?;
    w.u8(bone.label())?;
    w.u32(index)?;
    for c in f.offset_mm().unwrap_or([0.0; 3]) {
        w.f32(c)?;
    }
    Ok(())
}

fn read_feature<R: Read>(r: &mut Reader<R>) -> Result<FeatureDescriptor> {
    let code = r.u8()?;
    let kind = FeatureKind::from_code(code).ok_or_else(|| Error::BadModel(format!("unknown feature code {code}")))?;
    let bone_label = r.u8()?;
    let bone =
        Bone::from_label(bone_label).ok_or_else(|| Error::BadModel(format!("unknown bone label {bone_label}")))?;
    let index = r.u32()?;
    let offset = [r.f32()?, r.f32()?, r.f32()?];
    if offset.iter().any(|c| !c.is_finite()) {
        return Err(Error::BadModel("non-finite feature offset".into()));
    }
    Ok(FeatureDescriptor::from_parts(kind, bone, index, offset))
}

pub fn write_forest<W: Write>(forest: &RandomForest, out: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        num_classes: forest.num_classes,
        pass: forest.pass,
        features: forest.features.clone(),
        forest: forest.config.clone(),
    })
    .map_err(|e| Error::BadModel(e.to_string()))?;
    let mut w = Writer::new(out);
    let io = |e| Error::io("<forest stream>", e);
    w.bytes(FOREST_MAGIC).map_err(io)?;
    w.u32(FOREST_VERSION).map_err(io)?;
    w.blob(&header).map_err(io)?;
    w.u32(forest.trees.len() as u32).map_err(io)?;
    for tree in &forest.trees {
        w.u32(tree.nodes.len() as u32).map_err(io)?;
        for node in &tree.nodes {
            match node {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    w.u8(TAG_SPLIT).map_err(io)?;
                    write_feature(&mut w, feature).map_err(io)?;
                    w.f32(*threshold).map_err(io)?;
                    w.u32(*left).map_err(io)?;
                    w.u32(*right).map_err(io)?;
                }
                TreeNode::Leaf { posterior } => {
                    w.u8(TAG_LEAF).map_err(io)?;
                    for &p in posterior {
                        w.f64(p).map_err(io)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn read_forest<R: Read>(input: R) -> Result<RandomForest> {
    let mut r = Reader::new(input);
    let magic: [u8; 8] = r.array()?;
    if &magic != FOREST_MAGIC {
        return Err(Error::BadModel("not a forest model (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FOREST_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FOREST_VERSION,
        });
    }
    let header: Header =
        serde_json::from_slice(&r.blob(MAX_HEADER)?).map_err(|e| Error::BadModel(format!("bad forest header: {e}")))?;
    let num_trees = r.u32()? as usize;
    let mut trees = Vec::with_capacity(num_trees.min(4096));
    for _ in 0..num_trees {
        let num_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(num_nodes.min(1 << 20));
        for _ in 0..num_nodes {
            match r.u8()? {
                TAG_SPLIT => {
                    let feature = read_feature(&mut r)?;
                    let threshold = r.f32()?;
                    let left = r.u32()?;
                    let right = r.u32()?;
                    nodes.push(TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    });
                }
                TAG_LEAF => {
                    let posterior = (0..header.num_classes).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    nodes.push(TreeNode::Leaf { posterior });
                }
                tag => return Err(Error::BadModel(format!("unknown node tag {tag}"))),
            }
        }
        trees.push(DecisionTree::new(nodes, header.num_classes)?);
    }
    RandomForest::new(trees, header.num_classes, header.pass, header.features, header.forest)
}

impl RandomForest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_forest(self, &mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_forest(bytes)
    }
}
