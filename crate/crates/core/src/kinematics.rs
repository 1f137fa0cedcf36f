//! Joint/bone encodings and part-segment slicing.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D};
use crate::skeleton::Skeleton;

/// Bones shorter than this are treated as degenerate.
pub const MIN_BONE_LENGTH_MM: f64 = 1e-9;

/// Per-bone unit direction and length, in skeleton bone order.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneSet {
    pub units: Vec<[f64; 3]>,
    pub lengths: Vec<f64>,
}

impl BoneSet {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

fn check_joints(n: usize, skel: &Skeleton) -> Result<()> {
    if n != skel.joint_count() {
        return Err(Error::SkeletonMismatch(format!(
            "pose has {n} joints, skeleton {}",
            skel.joint_count()
        )));
    }
    Ok(())
}

pub fn bones_from_joints(pose: &Pose3D, skel: &Skeleton) -> Result<BoneSet> {
    check_joints(pose.len(), skel)?;
    if !pose.is_finite() {
        return Err(Error::DegeneratePose("non-finite joints".into()));
    }
    let mut units = Vec::with_capacity(skel.bones().len());
    let mut lengths = Vec::with_capacity(skel.bones().len());
    for &(p, c) in skel.bones() {
        let (a, b) = (pose.joints[p], pose.joints[c]);
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if len < MIN_BONE_LENGTH_MM {
            return Err(Error::ZeroLengthBone { parent: p, child: c });
        }
        units.push([d[0] / len, d[1] / len, d[2] / len]);
        lengths.push(len);
    }
    Ok(BoneSet { units, lengths })
}

pub fn joints_from_bones(bones: &BoneSet, root: [f64; 3], skel: &Skeleton) -> Result<Pose3D> {
    if bones.units.len() != skel.bones().len() || bones.lengths.len() != skel.bones().len() {
        return Err(Error::SkeletonMismatch(format!(
            "bone set has {} bones, skeleton {}",
            bones.len(),
            skel.bones().len()
        )));
    }
    let mut joints = vec![[0.0; 3]; skel.joint_count()];
    joints[skel.topological_order()[0]] = root;
    for (i, &(p, c)) in skel.bones().iter().enumerate() {
        let (u, l) = (bones.units[i], bones.lengths[i]);
        let base = joints[p];
        joints[c] = [base[0] + l * u[0], base[1] + l * u[1], base[2] + l * u[2]];
    }
    Ok(Pose3D::new(joints))
}

/// Per-segment joint sub-arrays, in the fixed segment order.
pub fn segment_slices<const D: usize>(joints: &[[f64; D]], skel: &Skeleton) -> Vec<Vec<[f64; D]>> {
    skel.segments()
        .iter()
        .map(|seg| seg.iter().map(|&j| joints[j]).collect())
        .collect()
}

pub fn segment_slices_3d(pose: &Pose3D, skel: &Skeleton) -> Result<Vec<Vec<[f64; 3]>>> {
    check_joints(pose.len(), skel)?;
    Ok(segment_slices(&pose.joints, skel))
}

pub fn segment_slices_2d(pose: &Pose2D, skel: &Skeleton) -> Result<Vec<Vec<[f64; 2]>>> {
    check_joints(pose.len(), skel)?;
    Ok(segment_slices(&pose.joints, skel))
}

/// Constant matrices that express the joint/bone conversions as linear maps
/// on flattened `[batch, joints*3]` rows, for use inside differentiable graphs.
#[derive(Clone, Debug)]
pub struct BoneAlgebra {
    /// `joints * diff = bone vectors`, shape `[J*3, B*3]`.
    pub diff: Array2<f64>,
    /// `bone vectors * assemble = joints` with the root at the origin, `[B*3, J*3]`.
    pub assemble: Array2<f64>,
    /// Sums xyz triples per bone, `[B*3, B]`.
    pub group_sum: Array2<f64>,
    /// Repeats a per-bone scalar three times, `[B, B*3]`.
    pub expand: Array2<f64>,
    /// Copies the root xyz to every joint, `[3, J*3]`.
    pub root_tile: Array2<f64>,
}

impl BoneAlgebra {
    pub fn new(skel: &Skeleton) -> Self {
        let j = skel.joint_count();
        let b = skel.bones().len();
        let mut diff = Array2::zeros((j * 3, b * 3));
        let mut assemble = Array2::zeros((b * 3, j * 3));
        for (i, &(p, c)) in skel.bones().iter().enumerate() {
            for k in 0..3 {
                diff[[c * 3 + k, i * 3 + k]] = 1.0;
                diff[[p * 3 + k, i * 3 + k]] = -1.0;
                for joint in 0..j {
                    if skel.is_ancestor(c, joint) {
                        assemble[[i * 3 + k, joint * 3 + k]] = 1.0;
                    }
                }
            }
        }
        let mut group_sum = Array2::zeros((b * 3, b));
        for i in 0..b {
            for k in 0..3 {
                group_sum[[i * 3 + k, i]] = 1.0;
            }
        }
        let expand = group_sum.t().to_owned();
        let mut root_tile = Array2::zeros((3, j * 3));
        for joint in 0..j {
            for k in 0..3 {
                root_tile[[k, joint * 3 + k]] = 1.0;
            }
        }
        Self {
            diff,
            assemble,
            group_sum,
            expand,
            root_tile,
        }
    }
}
