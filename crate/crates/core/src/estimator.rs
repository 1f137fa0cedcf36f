//! Temporal-convolution 2D-to-3D lifting network.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::camera::{Camera, ImageNormalizer};
use crate::checkpoint::Checkpoint;
use crate::config::EstimatorConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{gradient, Architecture, ParamModel};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::pose::{Pose2D, Pose3D, PoseClip};
use crate::seeding::RunRng;

/// The lifting network with its fixed input normalisation. Inputs are pixel
/// clips; graph outputs are root-centred metres, plain outputs millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftingModel {
    pub model: ParamModel,
    pub normalizer: ImageNormalizer,
    joints: usize,
}

/// Stored alongside a checkpointed estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiftingMeta {
    pub normalizer: ImageNormalizer,
    pub joints: usize,
}

impl LiftingModel {
    pub fn new(frames: usize, cfg: &EstimatorConfig, joints: usize, camera: &Camera, rng: &mut RunRng) -> Result<Self> {
        let mut rf = cfg.kernel;
        let mut blocks = 0;
        while rf < frames {
            rf *= cfg.kernel;
            blocks += 1;
        }
        let arch = Architecture::TemporalConv {
            frames,
            in_features: joints * 2,
            channels: cfg.channels,
            blocks,
            kernel: cfg.kernel,
            output: joints * 3,
            activation: cfg.activation,
        };
        arch.validate()?;
        Ok(Self {
            model: ParamModel::init(arch, rng)?,
            normalizer: ImageNormalizer::from_camera(camera),
            joints,
        })
    }

    pub fn from_parts(model: ParamModel, meta: LiftingMeta) -> Result<Self> {
        match model.arch() {
            Architecture::TemporalConv {
                in_features, output, ..
            } if *in_features == meta.joints * 2 && *output == meta.joints * 3 => {}
            _ => return Err(Error::DescriptorMismatch),
        }
        Ok(Self {
            model,
            normalizer: meta.normalizer,
            joints: meta.joints,
        })
    }

    /// Checkpoint with the network under `estimator` and the meta in `extra`.
    pub fn to_checkpoint(&self, seed: u64, step: u64, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(seed, step, config_hash).with_model("estimator", &self.model);
        ck.extra = serde_json::json!({ "estimator": self.meta() });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = serde_json::from_value(ck.extra["estimator"].clone())
            .map_err(|e| Error::Checkpoint(format!("estimator meta: {e}")))?;
        Self::from_parts(ck.model("estimator")?, meta)
    }

    pub fn meta(&self) -> LiftingMeta {
        LiftingMeta {
            normalizer: self.normalizer,
            joints: self.joints,
        }
    }

    pub fn frames(&self) -> usize {
        match self.model.arch() {
            Architecture::TemporalConv { frames, .. } => *frames,
            Architecture::Mlp { .. } => 1,
        }
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// `I - root_tile`: subtracts the root from every joint.
    fn centring(&self) -> Tensor {
        let w = self.joints * 3;
        Array2::from_shape_fn((w, w), |(r, c)| {
            let own = if r == c { 1.0 } else { 0.0 };
            let root = if r < 3 && r == c % 3 { 1.0 } else { 0.0 };
            own - root
        })
    }

    /// Root-centred prediction in metres for normalised input rows.
    pub fn forward_graph<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let out = self.model.apply(params, x)?;
        Ok(out.matmul(x.tape().constant(self.centring())))
    }

    pub fn forward_rows(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.model.bind_frozen(&tape);
        Ok(self.forward_graph(&p, tape.constant(x.clone()))?.to_tensor())
    }

    /// Normalised network row of a pixel clip.
    pub fn input_row(&self, clip: &PoseClip<Pose2D>) -> Result<Vec<f64>> {
        if clip.frame_count() != self.frames() {
            return Err(Error::shape(format!("{} frames", self.frames()), clip.frame_count()));
        }
        let mut row = Vec::with_capacity(self.frames() * self.joints * 2);
        for f in &clip.frames {
            if f.len() != self.joints {
                return Err(Error::shape(format!("{} joints", self.joints), f.len()));
            }
            let start = row.len();
            row.extend(f.to_flat());
            self.normalizer.normalize(&mut row[start..]);
        }
        Ok(row)
    }

    /// Centre-frame 3D pose (mm, root at the origin).
    pub fn predict(&self, clip: &PoseClip<Pose2D>) -> Result<Pose3D> {
        let row = self.input_row(clip)?;
        let x = Tensor::from_shape_vec((1, row.len()), row).unwrap();
        let out = self.forward_rows(&x)?;
        Pose3D::from_flat(&out.iter().map(|v| v * 1000.0).collect::<Vec<_>>())
    }

    /// Input rows for every clip of `ds`, in [`Dataset::clip_ids`] order.
    pub fn dataset_inputs(&self, ds: &Dataset) -> Tensor {
        let ids = ds.clip_ids();
        let width = self.frames() * self.joints * 2;
        let mut x = Tensor::zeros((ids.len(), width));
        for (r, &(s, f)) in ids.iter().enumerate() {
            let row = ds.window_row(s, f, self.frames(), &self.normalizer);
            x.row_mut(r).assign(&ndarray::ArrayView1::from(&row));
        }
        x
    }

    /// Predictions (metres) for many rows, evaluated in chunks.
    pub fn forward_batched(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let mut out = Tensor::zeros((x.nrows(), self.joints * 3));
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + chunk.max(1)).min(x.nrows());
            let part = self.forward_rows(&x.slice(ndarray::s![start..end, ..]).to_owned())?;
            out.slice_mut(ndarray::s![start..end, ..]).assign(&part);
            start = end;
        }
        Ok(out)
    }

    /// Millimetre predictions for every clip of `ds`.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<Pose3D>> {
        let out = self.forward_batched(&self.dataset_inputs(ds), 256)?;
        out.rows()
            .into_iter()
            .map(|r| Pose3D::from_flat(&r.iter().map(|v| v * 1000.0).collect::<Vec<_>>()))
            .collect()
    }
}

/// Root-centred 3D labels of `ds` in metres.
pub fn dataset_targets(ds: &Dataset) -> Result<Tensor> {
    let poses = ds.all_3d()?;
    let width = poses.first().map_or(0, |p| p.len() * 3);
    let mut y = Tensor::zeros((poses.len(), width));
    for (r, p) in poses.iter().enumerate() {
        for (c, v) in p.root_centered().to_flat().into_iter().enumerate() {
            y[[r, c]] = v / 1000.0;
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: LiftingModel,
    pub epoch_losses: Vec<f64>,
}

/// Supervised MSE training on labelled source clips with AdamW.
pub fn pretrain_source(
    init: &LiftingModel,
    source: &Dataset,
    cfg: &PretrainConfig,
    rng: &mut RunRng,
) -> Result<PretrainOutcome> {
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    let x = init.dataset_inputs(source);
    let y = dataset_targets(source)?;
    pretrain_rows(init, &x, &y, cfg, rng)
}

/// [`pretrain_source`] on precomputed rows.
pub fn pretrain_rows(
    init: &LiftingModel,
    x: &Tensor,
    y: &Tensor,
    cfg: &PretrainConfig,
    rng: &mut RunRng,
) -> Result<PretrainOutcome> {
    if x.nrows() == 0 {
        return Err(Error::EmptySource);
    }
    if y.nrows() != x.nrows() || y.ncols() != init.joints * 3 {
        return Err(Error::shape(
            format!("[{}, {}]", x.nrows(), init.joints * 3),
            format!("{:?}", y.dim()),
        ));
    }
    let mut est = init.clone();
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.learning_rate), &est.model);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = x.select(ndarray::Axis(0), chunk);
            let yb = y.select(ndarray::Axis(0), chunk);
            let view = est.clone();
            let (loss, grads) = gradient(&est.model, |tape, p| {
                let pred = view.forward_graph(p, tape.constant(xb))?;
                Ok(pred.sub(tape.constant(yb)).square().mean())
            })?;
            opt.step(&mut est.model, &grads)?;
            total += loss;
            count += 1;
        }
        epoch_losses.push(total / count as f64);
    }
    Ok(PretrainOutcome {
        model: est,
        epoch_losses,
    })
}
