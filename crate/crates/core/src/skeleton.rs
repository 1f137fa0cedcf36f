//! The 16-joint body model: joint tree, bone list and part segments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 16;
pub const BONE_COUNT: usize = JOINT_COUNT - 1;
pub const SKELETON_FORMAT_VERSION: u32 = 1;

/// Segment names in their fixed encoding order.
pub const SEGMENT_NAMES: [&str; 6] = ["left_arm", "right_arm", "left_leg", "right_leg", "torso", "ex_torso"];

pub mod joint {
    pub const PELVIS: usize = 0;
    pub const SPINE: usize = 1;
    pub const NECK: usize = 2;
    pub const HEAD: usize = 3;
    pub const L_SHOULDER: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const L_WRIST: usize = 6;
    pub const R_SHOULDER: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const R_WRIST: usize = 9;
    pub const L_HIP: usize = 10;
    pub const L_KNEE: usize = 11;
    pub const L_ANKLE: usize = 12;
    pub const R_HIP: usize = 13;
    pub const R_KNEE: usize = 14;
    pub const R_ANKLE: usize = 15;
}

const CANONICAL_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

const CANONICAL_PARENTS: [i64; JOINT_COUNT] = [-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14];

/// Joint tree plus named part segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    name: String,
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    segments: Vec<Vec<usize>>,
    /// Joints in an order where every parent precedes its children.
    order: Vec<usize>,
    /// (parent, child) pairs following `order`.
    bones: Vec<(usize, usize)>,
}

/// On-disk form of a skeleton.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonDoc {
    pub version: u32,
    pub name: String,
    pub joint_names: Vec<String>,
    /// Parent index per joint, -1 for the root.
    pub parents: Vec<i64>,
    pub segments: BTreeMap<String, Vec<usize>>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::canonical()
    }
}

impl Skeleton {
    /// The built-in 16-joint skeleton.
    pub fn canonical() -> Self {
        let segments = [
            vec![4, 5, 6],
            vec![7, 8, 9],
            vec![10, 11, 12],
            vec![13, 14, 15],
            vec![0, 1, 2, 3, 4, 7, 10, 13],
            vec![3, 4, 7, 10, 13, 6, 9, 12, 15],
        ];
        let doc = SkeletonDoc {
            version: SKELETON_FORMAT_VERSION,
            name: "canonical-16".into(),
            joint_names: CANONICAL_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: CANONICAL_PARENTS.to_vec(),
            segments: SEGMENT_NAMES
                .iter()
                .zip(segments)
                .map(|(n, s)| (n.to_string(), s))
                .collect(),
        };
        Self::from_doc(doc).expect("canonical skeleton is valid")
    }

    pub fn from_doc(doc: SkeletonDoc) -> Result<Self> {
        let bad = |m: String| Error::InvalidSkeleton(m);
        if doc.version != SKELETON_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", doc.version)));
        }
        let n = doc.parents.len();
        if n != JOINT_COUNT || doc.joint_names.len() != JOINT_COUNT {
            return Err(bad(format!(
                "expected {JOINT_COUNT} joints, got {n} parents and {} names",
                doc.joint_names.len()
            )));
        }
        let mut parents = Vec::with_capacity(n);
        for (j, &p) in doc.parents.iter().enumerate() {
            parents.push(match p {
                -1 => None,
                p if p >= 0 && (p as usize) < n && p as usize != j => Some(p as usize),
                p => return Err(bad(format!("joint {j} has invalid parent {p}"))),
            });
        }
        if parents[0].is_some() || parents.iter().filter(|p| p.is_none()).count() != 1 {
            return Err(bad("joint 0 must be the only root".into()));
        }
        // Index order when it is already topological, otherwise breadth-first
        // from the root. A joint never reached means a cycle.
        let mut order: Vec<usize> = if (1..n).all(|c| parents[c].is_some_and(|p| p < c)) {
            (0..n).collect()
        } else {
            vec![0]
        };
        let mut head = 0;
        while order.len() < n && head < order.len() {
            let p = order[head];
            head += 1;
            order.extend((0..n).filter(|&c| parents[c] == Some(p)));
        }
        if order.len() != n {
            return Err(bad("parent array does not form a single tree".into()));
        }
        let bones = order[1..].iter().map(|&c| (parents[c].unwrap(), c)).collect();

        let mut segments = Vec::with_capacity(SEGMENT_NAMES.len());
        if doc.segments.len() != SEGMENT_NAMES.len() {
            return Err(bad(format!(
                "expected segments {SEGMENT_NAMES:?}, got {:?}",
                doc.segments.keys().collect::<Vec<_>>()
            )));
        }
        for name in SEGMENT_NAMES {
            let joints = doc
                .segments
                .get(name)
                .ok_or_else(|| bad(format!("missing segment {name}")))?;
            if joints.is_empty() || joints.iter().any(|&j| j >= n) {
                return Err(bad(format!("segment {name} has invalid joints")));
            }
            segments.push(joints.clone());
        }
        let mut covered = [false; JOINT_COUNT];
        segments.iter().flatten().for_each(|&j| covered[j] = true);
        if let Some(j) = covered.iter().position(|c| !c) {
            return Err(bad(format!("joint {j} belongs to no segment")));
        }
        Ok(Self {
            name: doc.name,
            joint_names: doc.joint_names,
            parents,
            segments,
            order,
            bones,
        })
    }

    pub fn to_doc(&self) -> SkeletonDoc {
        SkeletonDoc {
            version: SKELETON_FORMAT_VERSION,
            name: self.name.clone(),
            joint_names: self.joint_names.clone(),
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            segments: SEGMENT_NAMES
                .iter()
                .zip(&self.segments)
                .map(|(n, s)| (n.to_string(), s.clone()))
                .collect(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let doc: SkeletonDoc = toml::from_str(s).map_err(|e| Error::InvalidSkeleton(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_doc()).expect("skeleton serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Short content hash identifying the joint tree, names and segments.
    pub fn hash(&self) -> String {
        let mut doc = self.to_doc();
        doc.name.clear();
        let canonical = serde_json::to_string(&doc).expect("skeleton serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Bones as (parent, child), parents always listed before children.
    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Joint sets in the order of [`SEGMENT_NAMES`].
    pub fn segments(&self) -> &[Vec<usize>] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[usize]> {
        SEGMENT_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.segments[i].as_slice())
    }

    /// Whether `ancestor` lies on the path from the root to `joint`
    /// (a joint counts as its own ancestor).
    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut j = Some(joint);
        while let Some(cur) = j {
            if cur == ancestor {
                return true;
            }
            j = self.parents[cur];
        }
        false
    }

    /// Mirror joint under a left/right swap, by name prefix.
    pub fn mirror(&self, joint: usize) -> usize {
        let name = &self.joint_names[joint];
        let swapped = if let Some(rest) = name.strip_prefix("l_") {
            format!("r_{rest}")
        } else if let Some(rest) = name.strip_prefix("r_") {
            format!("l_{rest}")
        } else {
            return joint;
        };
        self.joint_names.iter().position(|n| *n == swapped).unwrap_or(joint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_is_a_tree_with_fifteen_bones() {
        let s = Skeleton::canonical();
        assert_eq!(s.joint_count(), 16);
        assert_eq!(s.bones().len(), 15);
        for &(p, c) in s.bones() {
            assert_eq!(s.parent(c), Some(p));
        }
        let pos: Vec<usize> = (0..16)
            .map(|j| s.topological_order().iter().position(|&o| o == j).unwrap())
            .collect();
        for &(p, c) in s.bones() {
            assert!(pos[p] < pos[c]);
        }
    }

    #[test]
    fn segments_cover_every_joint() {
        let s = Skeleton::canonical();
        let mut seen = [false; 16];
        s.segments().iter().flatten().for_each(|&j| seen[j] = true);
        assert!(seen.iter().all(|&b| b));
        assert_eq!(s.segment("left_arm").unwrap(), &[4, 5, 6]);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let s = Skeleton::canonical();
        let back = Skeleton::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn rejects_cycles_and_missing_segments() {
        let mut doc = Skeleton::canonical().to_doc();
        doc.parents[1] = 3;
        assert!(matches!(Skeleton::from_doc(doc), Err(Error::InvalidSkeleton(_))));
        let mut doc = Skeleton::canonical().to_doc();
        doc.segments.remove("ex_torso");
        assert!(Skeleton::from_doc(doc).is_err());
    }

    #[test]
    fn segment_edit_changes_hash() {
        let s = Skeleton::canonical();
        let mut doc = s.to_doc();
        doc.segments.get_mut("ex_torso").unwrap().pop();
        let t = Skeleton::from_doc(doc).unwrap();
        assert_ne!(s.hash(), t.hash());
    }

    #[test]
    fn mirror_pairs() {
        let s = Skeleton::canonical();
        assert_eq!(s.mirror(joint::L_WRIST), joint::R_WRIST);
        assert_eq!(s.mirror(joint::R_KNEE), joint::L_KNEE);
        assert_eq!(s.mirror(joint::HEAD), joint::HEAD);
    }
}
