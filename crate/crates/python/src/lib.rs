//! Python bindings. Poses cross the boundary as nested lists of floats:
//! `[[x, y, z], ...]` in millimetres for 3D and `[[u, v], ...]` pixels for 2D.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use lipose::camera::Camera as CoreCamera;
use lipose::config::RunConfig as CoreRunConfig;
use lipose::diffusion::{ddim_sigma as core_ddim_sigma, DiffusionConfig};
use lipose::kinematics::{bones_from_joints as core_bones, joints_from_bones as core_joints, BoneSet};
use lipose::lifelong::{self, AdaptationState, RunHistory, RunOptions};
use lipose::metrics;
use lipose::pose::{Pose2D, Pose3D, PoseClip};
use lipose::skeleton::Skeleton as CoreSkeleton;
use lipose::synth::{synth_domain, SynthDomainSpec};

create_exception!(lipose_py, LiposeError, PyException);
create_exception!(lipose_py, AccessViolation, LiposeError);

fn err(e: lipose::Error) -> PyErr {
    match e {
        lipose::Error::AccessViolation(_) => AccessViolation::new_err(e.to_string()),
        _ => LiposeError::new_err(e.to_string()),
    }
}

type Joints3 = Vec<[f64; 3]>;
type Joints2 = Vec<[f64; 2]>;

#[pyclass(module = "lipose_py", skip_from_py_object)]
#[derive(Clone)]
struct Skeleton {
    inner: CoreSkeleton,
}

#[pymethods]
impl Skeleton {
    /// The 16-joint body model used throughout.
    #[staticmethod]
    fn canonical() -> Self {
        Self {
            inner: CoreSkeleton::canonical(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreSkeleton::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn joint_names(&self) -> Vec<String> {
        self.inner.joint_names().to_vec()
    }

    #[getter]
    fn parents(&self) -> Vec<Option<usize>> {
        self.inner.parents().to_vec()
    }

    #[getter]
    fn segments(&self) -> Vec<Vec<usize>> {
        self.inner.segments().to_vec()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __len__(&self) -> usize {
        self.inner.joint_count()
    }
}

/// Unit directions and lengths of every bone, in skeleton bone order.
#[pyfunction]
fn bones_from_joints(joints: Joints3, skeleton: &Skeleton) -> PyResult<(Joints3, Vec<f64>)> {
    let b = core_bones(&Pose3D::new(joints), &skeleton.inner).map_err(err)?;
    Ok((b.units, b.lengths))
}

#[pyfunction]
fn joints_from_bones(units: Joints3, lengths: Vec<f64>, root: [f64; 3], skeleton: &Skeleton) -> PyResult<Joints3> {
    let bones = BoneSet { units, lengths };
    Ok(core_joints(&bones, root, &skeleton.inner).map_err(err)?.joints)
}

#[pyfunction]
fn mpjpe(pred: Joints3, gt: Joints3) -> PyResult<f64> {
    metrics::mpjpe(&Pose3D::new(pred), &Pose3D::new(gt)).map_err(err)
}

/// MPJPE after least-squares similarity alignment of `pred` onto `gt`.
#[pyfunction]
fn pa_mpjpe(pred: Joints3, gt: Joints3) -> PyResult<f64> {
    metrics::pa_mpjpe(&Pose3D::new(pred), &Pose3D::new(gt)).map_err(err)
}

#[pyclass(module = "lipose_py", skip_from_py_object)]
#[derive(Clone)]
struct Camera {
    inner: CoreCamera,
}

#[pymethods]
impl Camera {
    #[new]
    #[pyo3(signature = (fx=None, fy=None, cx=None, cy=None, subject_depth_offset=None))]
    fn new(
        fx: Option<f64>,
        fy: Option<f64>,
        cx: Option<f64>,
        cy: Option<f64>,
        subject_depth_offset: Option<f64>,
    ) -> PyResult<Self> {
        let d = CoreCamera::default();
        let inner = CoreCamera {
            fx: fx.unwrap_or(d.fx),
            fy: fy.unwrap_or(d.fy),
            cx: cx.unwrap_or(d.cx),
            cy: cy.unwrap_or(d.cy),
            subject_depth_offset: subject_depth_offset.unwrap_or(d.subject_depth_offset),
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn project(&self, joints: Joints3) -> PyResult<Joints2> {
        Ok(self.inner.project(&Pose3D::new(joints)).map_err(err)?.joints)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Camera(fx={}, fy={}, cx={}, cy={}, subject_depth_offset={})",
            c.fx, c.fy, c.cx, c.cy, c.subject_depth_offset
        )
    }
}

#[pyclass(module = "lipose_py", skip_from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl RunConfig {
    /// Two synthetic target domains after a synthetic source.
    #[staticmethod]
    fn demo() -> Self {
        Self {
            inner: CoreRunConfig::demo(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreRunConfig::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn run_dir_name(&self, seed: u64) -> String {
        self.inner.run_dir_name(seed)
    }

    /// Copy with one dotted key replaced, e.g. `set("training.adapt_epochs", 3)`.
    /// `None` removes an optional key. The result is validated.
    fn set(&self, key: &str, value: Option<Bound<'_, PyAny>>) -> PyResult<Self> {
        let new = match value {
            None => None,
            Some(v) => Some(if let Ok(b) = v.extract::<bool>() {
                toml::Value::Boolean(b)
            } else if let Ok(i) = v.extract::<i64>() {
                toml::Value::Integer(i)
            } else if let Ok(f) = v.extract::<f64>() {
                toml::Value::Float(f)
            } else {
                toml::Value::String(v.extract::<String>()?)
            }),
        };
        let mut doc: toml::Table =
            toml::from_str(&self.inner.to_toml_string()).map_err(|e| LiposeError::new_err(e.to_string()))?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().unwrap_or_default();
        let mut table = &mut doc;
        for p in parts {
            table = table
                .get_mut(p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| LiposeError::new_err(format!("no table {p:?} in {key:?}")))?;
        }
        match new {
            Some(v) => table.insert(last.to_string(), v),
            None => table.remove(last),
        };
        let text = toml::to_string(&doc).map_err(|e| LiposeError::new_err(e.to_string()))?;
        let inner = CoreRunConfig::from_toml_str(&text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn targets(&self) -> Vec<String> {
        self.inner.targets.iter().map(|t| t.name().to_string()).collect()
    }
}

/// Centre-frame 3D poses of a plain synthetic domain.
#[pyfunction]
#[pyo3(signature = (name, seed, clips, skeleton=None))]
fn synth_poses(name: &str, seed: u64, clips: usize, skeleton: Option<&Skeleton>) -> PyResult<Vec<Joints3>> {
    let skel = skeleton.map_or_else(CoreSkeleton::canonical, |s| s.inner.clone());
    let ds = synth_domain(&SynthDomainSpec::plain(name, seed), &skel, clips).map_err(err)?;
    Ok(ds.all_3d().map_err(err)?.into_iter().map(|p| p.joints).collect())
}

/// Cumulative noise level of the default diffusion schedule at step `k`.
#[pyfunction]
fn alpha_bar(k: usize) -> PyResult<f64> {
    DiffusionConfig::default().schedule().alpha_bar(k).map_err(err)
}

#[pyfunction]
fn ddim_sigma(eta: f64, alpha_bar_k: f64, alpha_bar_prev: f64) -> f64 {
    core_ddim_sigma(eta, alpha_bar_k, alpha_bar_prev)
}

/// Outcome of a lifelong run, or one loaded back from its directory.
#[pyclass(module = "lipose_py")]
struct Run {
    dir: PathBuf,
    state: AdaptationState,
    history: RunHistory,
}

#[pymethods]
impl Run {
    #[getter]
    fn dir(&self) -> String {
        self.dir.display().to_string()
    }

    #[getter]
    fn phase(&self) -> usize {
        self.state.phase
    }

    fn digest(&self) -> String {
        self.state.digest()
    }

    fn table(&self) -> String {
        lifelong::render_table(&self.history)
    }

    /// One JSON object per line: phase, model, domain and both metrics.
    fn records(&self) -> String {
        lifelong::render_records(&self.history)
    }

    /// `(domain, phase, mpjpe, pa_mpjpe)` rise in anchor error since the
    /// phase that introduced each domain.
    fn forgetting(&self) -> Vec<(String, usize, f64, f64)> {
        self.history
            .forgetting()
            .into_iter()
            .map(|f| (f.domain, f.phase, f.mpjpe, f.pa_mpjpe))
            .collect()
    }

    /// Lift a clip of 2D frames with the anchor (default) or live estimator.
    #[pyo3(signature = (frames, frame_rate=50.0, model="anchor"))]
    fn predict(&self, frames: Vec<Joints2>, frame_rate: f64, model: &str) -> PyResult<Joints3> {
        let est = match model {
            "anchor" => &self.state.anchor,
            "live" => &self.state.live,
            other => return Err(LiposeError::new_err(format!("unknown model {other:?}"))),
        };
        let clip = PoseClip::new(frames.into_iter().map(Pose2D::new).collect(), frame_rate).map_err(err)?;
        Ok(est.predict(&clip).map_err(err)?.joints)
    }
}

#[pyfunction]
#[pyo3(signature = (config, seed, out, force=false, resume=false, stop_after=None))]
fn run_experiment(
    py: Python<'_>,
    config: &RunConfig,
    seed: u64,
    out: PathBuf,
    force: bool,
    resume: bool,
    stop_after: Option<usize>,
) -> PyResult<Run> {
    let opts = RunOptions {
        seed,
        out,
        force,
        resume,
        stop_after,
    };
    let cfg = config.inner.clone();
    let r = py.detach(move || lifelong::run_experiment(&cfg, &opts)).map_err(err)?;
    Ok(Run {
        dir: r.dir,
        state: r.state,
        history: r.history,
    })
}

#[pyfunction]
fn load_run(dir: PathBuf) -> PyResult<Run> {
    let (state, history) = lifelong::load_run(&dir).map_err(err)?;
    Ok(Run { dir, state, history })
}

#[pymodule]
fn lipose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LiposeError", m.py().get_type::<LiposeError>())?;
    m.add("AccessViolation", m.py().get_type::<AccessViolation>())?;
    m.add_class::<Skeleton>()?;
    m.add_class::<Camera>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Run>()?;
    for f in [
        wrap_pyfunction!(bones_from_joints, m)?,
        wrap_pyfunction!(joints_from_bones, m)?,
        wrap_pyfunction!(mpjpe, m)?,
        wrap_pyfunction!(pa_mpjpe, m)?,
        wrap_pyfunction!(synth_poses, m)?,
        wrap_pyfunction!(alpha_bar, m)?,
        wrap_pyfunction!(ddim_sigma, m)?,
        wrap_pyfunction!(run_experiment, m)?,
        wrap_pyfunction!(load_run, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
