//! Pinhole projection and image-coordinate normalisation.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D};

/// Minimum admissible depth (z + offset) of a projected joint.
pub const MIN_DEPTH_MM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Added to every joint's z before projection.
    pub subject_depth_offset: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            fx: 1000.0,
            fy: 1000.0,
            cx: 500.0,
            cy: 500.0,
            subject_depth_offset: 5000.0,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.subject_depth_offset]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::config(
                "camera",
                "focal lengths must be positive and all fields finite",
            ));
        }
        Ok(())
    }

    pub fn project(&self, pose: &Pose3D) -> Result<Pose2D> {
        let mut out = Vec::with_capacity(pose.len());
        for (j, p) in pose.joints.iter().enumerate() {
            let depth = p[2] + self.subject_depth_offset;
            if depth.is_nan() || depth <= MIN_DEPTH_MM {
                return Err(Error::BehindCamera { joint: j, depth });
            }
            out.push([self.fx * p[0] / depth + self.cx, self.fy * p[1] / depth + self.cy]);
        }
        Ok(Pose2D::new(out))
    }

    /// Batched projection of `[batch, J*3]` joint rows (mm) into
    /// `[batch, J*2]` pixel rows, as a differentiable graph.
    pub fn project_graph<'t>(&self, joints: Var<'t>) -> Result<Var<'t>> {
        let (_, width) = joints.shape();
        let n = width / 3;
        let xs: Vec<usize> = (0..n).map(|j| j * 3).collect();
        let ys: Vec<usize> = (0..n).map(|j| j * 3 + 1).collect();
        let zs: Vec<usize> = (0..n).map(|j| j * 3 + 2).collect();
        let depth = joints.gather_cols(&zs).add_scalar(self.subject_depth_offset);
        if let Some((i, d)) = depth
            .value()
            .iter()
            .enumerate()
            .find(|(_, d)| d.is_nan() || **d <= MIN_DEPTH_MM)
        {
            return Err(Error::BehindCamera {
                joint: i % n,
                depth: *d,
            });
        }
        let inv = depth.safe_recip();
        let u = joints.gather_cols(&xs).mul(inv).scale(self.fx).add_scalar(self.cx);
        let v = joints.gather_cols(&ys).mul(inv).scale(self.fy).add_scalar(self.cy);
        let u_cols: Vec<usize> = (0..n).map(|j| j * 2).collect();
        let v_cols: Vec<usize> = (0..n).map(|j| j * 2 + 1).collect();
        Ok(u.scatter_cols(&u_cols, n * 2).add(v.scatter_cols(&v_cols, n * 2)))
    }
}

/// Maps pixels to network units: offsets from the principal point, scaled so
/// that one unit is one metre at the subject's depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageNormalizer {
    pub cx: f64,
    pub cy: f64,
    pub px_per_unit_x: f64,
    pub px_per_unit_y: f64,
}

impl ImageNormalizer {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            cx: cam.cx,
            cy: cam.cy,
            px_per_unit_x: cam.fx * 1000.0 / cam.subject_depth_offset,
            px_per_unit_y: cam.fy * 1000.0 / cam.subject_depth_offset,
        }
    }

    /// Normalises interleaved (u, v) pairs in place.
    pub fn normalize(&self, uv: &mut [f64]) {
        for p in uv.chunks_exact_mut(2) {
            p[0] = (p[0] - self.cx) / self.px_per_unit_x;
            p[1] = (p[1] - self.cy) / self.px_per_unit_y;
        }
    }

    pub fn denormalize(&self, uv: &mut [f64]) {
        for p in uv.chunks_exact_mut(2) {
            p[0] = p[0] * self.px_per_unit_x + self.cx;
            p[1] = p[1] * self.px_per_unit_y + self.cy;
        }
    }

    /// Graph form of [`normalize`](Self::normalize) on `[batch, J*2]` rows.
    pub fn normalize_graph<'t>(&self, uv: Var<'t>) -> Var<'t> {
        let (rows, width) = uv.shape();
        let mut scale = ndarray::Array2::zeros((rows, width));
        let mut shift = ndarray::Array2::zeros((1, width));
        for c in 0..width {
            let (s, o) = if c % 2 == 0 {
                (1.0 / self.px_per_unit_x, self.cx)
            } else {
                (1.0 / self.px_per_unit_y, self.cy)
            };
            scale.column_mut(c).fill(s);
            shift[[0, c]] = -o * s;
        }
        let shift = uv.tape().constant(shift);
        uv.mul_const(scale).add_row(shift)
    }
}
