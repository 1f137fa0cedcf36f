//! Procedural motion domains: analytic joint-angle trajectories on the
//! canonical skeleton, viewed through a configurable camera.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D};
use crate::seeding::rng_for;
use crate::skeleton::{joint, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Walk,
    Reach,
    Squat,
    Wave,
}

pub const ACTIONS: [Action; 4] = [Action::Walk, Action::Reach, Action::Squat, Action::Wave];

/// Viewing direction: the subject is turned by `yaw` about the vertical
/// axis and tilted by `pitch`, each sequence adding uniform yaw jitter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewSpec {
    pub yaw_deg: f64,
    pub yaw_jitter_deg: f64,
    pub pitch_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomainSpec {
    pub name: String,
    pub seed: u64,
    /// Global bone-length multiplier.
    pub scale: f64,
    #[serde(default)]
    pub camera: Camera,
    #[serde(default)]
    pub view: ViewSpec,
    /// Standard deviation of additive 2D noise, pixels.
    pub noise_px: f64,
    pub actions: BTreeMap<Action, f64>,
    #[serde(default = "default_sequence_length")]
    pub frames_per_sequence: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_sequence_length() -> usize {
    100
}

fn default_frame_rate() -> f64 {
    50.0
}

impl SynthDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Error::InvalidSpec(format!("{}: {m}", self.name));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(bad("scale must be positive"));
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return Err(bad("noise must be >= 0"));
        }
        if self.actions.values().any(|&w| !(w >= 0.0)) {
            return Err(bad("action weights must be >= 0"));
        }
        let total: f64 = self.actions.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad("action weights must sum to 1"));
        }
        if self.frames_per_sequence == 0 || !(self.frame_rate > 0.0) {
            return Err(bad("sequence length and frame rate must be positive"));
        }
        self.camera.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(())
    }

    /// A neutral spec: unit scale, frontal view, no noise, uniform actions.
    pub fn plain(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed,
            scale: 1.0,
            camera: Camera::default(),
            view: ViewSpec::default(),
            noise_px: 0.0,
            actions: ACTIONS.iter().map(|&a| (a, 0.25)).collect(),
            frames_per_sequence: default_sequence_length(),
            frame_rate: default_frame_rate(),
        }
    }
}

/// Rest direction and length (mm) of every canonical bone, keyed by child.
/// Camera axes: x right, y down, z away from the camera; the subject faces
/// the camera, so its left side is at +x.
fn rest_bone(child: usize) -> ([f64; 3], f64) {
    use joint::*;
    match child {
        SPINE => ([0.0, -1.0, 0.0], 230.0),
        NECK => ([0.0, -1.0, 0.0], 250.0),
        HEAD => ([0.0, -1.0, 0.0], 140.0),
        L_SHOULDER => ([1.0, 0.0, 0.0], 160.0),
        R_SHOULDER => ([-1.0, 0.0, 0.0], 160.0),
        L_ELBOW | R_ELBOW => ([0.0, 1.0, 0.0], 280.0),
        L_WRIST | R_WRIST => ([0.0, 1.0, 0.0], 250.0),
        L_HIP => ([1.0, 0.0, 0.0], 130.0),
        R_HIP => ([-1.0, 0.0, 0.0], 130.0),
        L_KNEE | R_KNEE => ([0.0, 1.0, 0.0], 430.0),
        L_ANKLE | R_ANKLE => ([0.0, 1.0, 0.0], 420.0),
        _ => unreachable!("root has no bone"),
    }
}

/// Template bone lengths in skeleton bone order.
pub fn template_lengths(skel: &Skeleton) -> Vec<f64> {
    skel.bones().iter().map(|&(_, c)| rest_bone(c).1).collect()
}

/// Joint rotations keyed by the child joint of the bone they turn.
type Angles = BTreeMap<usize, Rotation3<f64>>;

fn rx(deg: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians())
}

fn rz(deg: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians())
}

/// Per-sequence motion parameters.
#[derive(Clone, Copy, Debug)]
struct Motion {
    action: Action,
    freq_hz: f64,
    phase: f64,
    amplitude: f64,
    side: f64,
}

fn angles(m: &Motion, t: f64) -> Angles {
    use joint::*;
    let phi = 2.0 * std::f64::consts::PI * m.freq_hz * t + m.phase;
    let a = m.amplitude;
    let mut out = Angles::new();
    match m.action {
        Action::Walk => {
            let s = phi.sin();
            // Forward flexion is a negative turn about x.
            out.insert(L_KNEE, rx(-30.0 * a * s));
            out.insert(R_KNEE, rx(30.0 * a * s));
            out.insert(L_ANKLE, rx(25.0 * a * (1.0 + (phi + 1.2).sin())));
            out.insert(R_ANKLE, rx(25.0 * a * (1.0 - (phi + 1.2).sin())));
            out.insert(L_ELBOW, rx(25.0 * a * s) * rz(-8.0));
            out.insert(R_ELBOW, rx(-25.0 * a * s) * rz(8.0));
            out.insert(L_WRIST, rx(-20.0));
            out.insert(R_WRIST, rx(-20.0));
            out.insert(SPINE, rx(-5.0));
        }
        Action::Reach => {
            let lift = 0.5 - 0.5 * phi.cos();
            let (arm, forearm, other) = if m.side > 0.0 {
                (L_ELBOW, L_WRIST, R_ELBOW)
            } else {
                (R_ELBOW, R_WRIST, L_ELBOW)
            };
            out.insert(arm, rx(-100.0 * a * lift) * rz(-15.0 * m.side * lift));
            out.insert(forearm, rx(-40.0 * (1.0 - lift)));
            out.insert(other, rz(10.0 * m.side));
            out.insert(SPINE, rx(-20.0 * a * lift));
            out.insert(L_KNEE, rx(-10.0 * lift));
            out.insert(L_ANKLE, rx(10.0 * lift));
        }
        Action::Squat => {
            let d = 0.5 - 0.5 * phi.cos();
            for (hip, knee) in [(L_KNEE, L_ANKLE), (R_KNEE, R_ANKLE)] {
                out.insert(hip, rx(-85.0 * a * d));
                out.insert(knee, rx(110.0 * a * d));
            }
            out.insert(SPINE, rx(-30.0 * a * d));
            out.insert(L_ELBOW, rx(-70.0 * a * d));
            out.insert(R_ELBOW, rx(-70.0 * a * d));
        }
        Action::Wave => {
            let (arm, forearm) = if m.side > 0.0 {
                (L_ELBOW, L_WRIST)
            } else {
                (R_ELBOW, R_WRIST)
            };
            // Abduct the upper arm overhead and swing the forearm.
            out.insert(arm, rz(-150.0 * m.side));
            out.insert(forearm, rz(-35.0 * m.side * a * phi.sin()) * rx(-15.0));
            out.insert(HEAD, rx(8.0 * phi.sin()));
            out.insert(SPINE, rz(4.0 * m.side * phi.sin()));
        }
    }
    out
}

/// Forward kinematics from the rest pose with per-bone rotations and a
/// global bone-length multiplier. The root stays at the origin.
fn forward_kinematics(skel: &Skeleton, rot: &Angles, scale: f64) -> Pose3D {
    let n = skel.joint_count();
    let mut global = vec![Rotation3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    for &(p, c) in skel.bones() {
        let local = rot.get(&c).copied().unwrap_or_else(Rotation3::identity);
        let g = global[p] * local;
        let (dir, len) = rest_bone(c);
        pos[c] = pos[p] + g * Vector3::new(dir[0], dir[1], dir[2]) * (len * scale);
        global[c] = g;
    }
    Pose3D::new(pos.iter().map(|v| [v.x, v.y, v.z]).collect())
}

fn pick_action(spec: &SynthDomainSpec, u: f64) -> Action {
    let mut acc = 0.0;
    let mut last = Action::Walk;
    for (&a, &w) in &spec.actions {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

/// Generates `n_clips` labelled frames (one clip per frame) as sequences of
/// `frames_per_sequence` frames. The 2D side is the projection of the 3D
/// ground truth plus Gaussian pixel noise.
pub fn synth_domain(spec: &SynthDomainSpec, skel: &Skeleton, n_clips: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_clips == 0 {
        return Err(Error::InvalidSpec(format!("{}: no clips requested", spec.name)));
    }
    let noise = Normal::new(0.0, spec.noise_px.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut sequences = Vec::new();
    let mut remaining = n_clips;
    let mut index = 0u64;
    while remaining > 0 {
        let len = remaining.min(spec.frames_per_sequence);
        remaining -= len;
        let mut rng = rng_for(spec.seed, "sequence", index);
        index += 1;
        let motion = Motion {
            action: pick_action(spec, rng.random()),
            freq_hz: rng.random_range(0.4..1.2),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amplitude: rng.random_range(0.7..1.15),
            side: if rng.random::<bool>() { 1.0 } else { -1.0 },
        };
        let yaw = spec.view.yaw_deg + spec.view.yaw_jitter_deg * rng.random_range(-1.0..=1.0);
        let view = Rotation3::from_axis_angle(&Vector3::x_axis(), spec.view.pitch_deg.to_radians())
            * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw.to_radians());
        let identity_view = yaw == 0.0 && spec.view.pitch_deg == 0.0;
        let mut poses3d = Vec::with_capacity(len);
        let mut poses2d = Vec::with_capacity(len);
        for f in 0..len {
            let t = f as f64 / spec.frame_rate;
            let body = forward_kinematics(skel, &angles(&motion, t), spec.scale);
            let pose = if identity_view {
                body
            } else {
                Pose3D::new(
                    body.joints
                        .iter()
                        .map(|j| {
                            let v = view * Vector3::new(j[0], j[1], j[2]);
                            [v.x, v.y, v.z]
                        })
                        .collect(),
                )
            };
            let mut uv = spec.camera.project(&pose)?;
            if spec.noise_px > 0.0 {
                for j in &mut uv.joints {
                    j[0] += noise.sample(&mut rng);
                    j[1] += noise.sample(&mut rng);
                }
            }
            poses2d.push(Pose2D::validated(uv.joints)?);
            poses3d.push(pose);
        }
        sequences.push(Sequence {
            poses2d,
            poses3d: Some(poses3d),
        });
    }
    Ok(Dataset {
        name: spec.name.clone(),
        frame_rate: spec.frame_rate,
        camera: spec.camera,
        sequences,
    })
}
