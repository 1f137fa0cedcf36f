//! Single-frame poses and fixed-length clips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint positions in millimetres, camera coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

/// Joint positions in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub joints: Vec<[f64; 2]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Self { joints }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![[0.0; 3]; n])
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::shape("multiple of 3 values", values.len()));
        }
        Ok(Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    /// Copy with joint 0 moved to the origin.
    pub fn root_centered(&self) -> Self {
        let r = self.joints.first().copied().unwrap_or([0.0; 3]);
        Self::new(
            self.joints
                .iter()
                .map(|j| [j[0] - r[0], j[1] - r[1], j[2] - r[2]])
                .collect(),
        )
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self::new(
            self.joints
                .iter()
                .map(|j| [j[0] + t[0], j[1] + t[1], j[2] + t[2]])
                .collect(),
        )
    }
}

impl Pose2D {
    pub fn new(joints: Vec<[f64; 2]>) -> Self {
        Self { joints }
    }

    /// Builds a pose for ingestion, rejecting non-finite or all-zero input.
    pub fn validated(joints: Vec<[f64; 2]>) -> Result<Self> {
        let pose = Self::new(joints);
        if !pose.is_finite() {
            return Err(Error::DegeneratePose("non-finite 2D pose".into()));
        }
        if pose.joints.iter().flatten().all(|&v| v == 0.0) {
            return Err(Error::DegeneratePose("all-zero 2D pose".into()));
        }
        Ok(pose)
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::shape("multiple of 2 values", values.len()));
        }
        Ok(Self::new(values.chunks_exact(2).map(|c| [c[0], c[1]]).collect()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }
}

/// `T` consecutive frames around a centre frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseClip<P> {
    pub frames: Vec<P>,
    pub frame_rate: f64,
}

impl<P> PoseClip<P> {
    pub fn new(frames: Vec<P>, frame_rate: f64) -> Result<Self> {
        if frames.len() % 2 == 0 {
            return Err(Error::shape("odd frame count", frames.len()));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn center(&self) -> &P {
        &self.frames[self.frames.len() / 2]
    }
}
